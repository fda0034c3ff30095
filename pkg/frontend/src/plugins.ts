/** Plug-in approval dialog.
 *
 * Shown when an opened form names a package that is not yet installed.
 * The dialog displays the manifest's identifying details before the
 * decision; the decision itself is forwarded to the agent, which does
 * all verification (manifest signature, artifact hash). A manifest the
 * agent rejects never reaches approval — the install call fails and
 * the UI shows the error instead of the dialog.
 */

import type { ApiClient } from "./api.js";
import type { FormView, PluginEntry, PluginManifestWire } from "./types.js";

export interface ApprovalDialogModel {
  name: string;
  version: string;
  publisherKeyId: string;
  codeHash: string;
  fetchUrl: string;
}

export function approvalDialog(manifest: PluginManifestWire): ApprovalDialogModel {
  return {
    name: manifest.name,
    version: manifest.version,
    publisherKeyId: manifest.publisher_key_id,
    codeHash: manifest.code_hash,
    fetchUrl: manifest.fetch_url,
  };
}

export function needsApproval(
  view: FormView,
  installed: PluginEntry[],
): PluginManifestWire | null {
  const manifest = view.form.manifest;
  if (!manifest) return null;
  const have = installed.some(
    (p) => p.name === manifest.name && p.version === manifest.version && p.installed,
  );
  return have ? null : manifest;
}

export async function decide(
  api: ApiClient,
  manifest: PluginManifestWire,
  approved: boolean,
): Promise<boolean> {
  // both outcomes are forwarded to the agent; a decline comes back as
  // USER_DECLINED and the message stays readable as plain mail
  try {
    await api.installPlugin(manifest, approved);
    return true;
  } catch (err) {
    if ((err as { code?: string }).code === "USER_DECLINED") return false;
    throw err;
  }
}
