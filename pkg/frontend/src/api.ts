/** Typed client for the agent's local HTTP API (docs/local-api.md).
 *
 * The UI holds no credentials or keys; every privileged action is one
 * of these calls. Errors surface as ApiCallError carrying the stable
 * protocol code from the 400 body.
 */

import type {
  AttachmentTicketWire,
  EnvelopeWire,
  FormView,
  InboxHeader,
  PartyLineInviteWire,
  PluginEntry,
  PluginManifestWire,
  SendReceipt,
  SendRequest,
  SignoffResult,
} from "./types.js";

export class ApiCallError extends Error {
  constructor(
    public readonly code: string,
    public readonly detail: string,
    public readonly status: number,
  ) {
    super(`${code}: ${detail}`);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
    private readonly base: string = "",
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchImpl(this.base + path, init);
    const doc = await response.json();
    if (!response.ok) {
      throw new ApiCallError(
        doc?.error ?? "INTERNAL",
        doc?.detail ?? "",
        response.status,
      );
    }
    return doc as T;
  }

  whoami(): Promise<{ address: string }> {
    return this.request("GET", "/api/whoami");
  }

  inbox(): Promise<{ headers: InboxHeader[] }> {
    return this.request("GET", "/api/inbox");
  }

  retrieve(messageId: string): Promise<{ envelope: EnvelopeWire }> {
    return this.request("GET", `/api/messages/${encodeURIComponent(messageId)}`);
  }

  delete(messageId: string): Promise<{ deleted: string }> {
    return this.request("DELETE", `/api/messages/${encodeURIComponent(messageId)}`);
  }

  send(req: SendRequest): Promise<{ receipt: SendReceipt }> {
    return this.request("POST", "/api/send", req);
  }

  pendingInstant(): Promise<{
    messages: EnvelopeWire[];
    invites: PartyLineInviteWire[];
  }> {
    return this.request("GET", "/api/im/pending");
  }

  joinPartyLine(invite: PartyLineInviteWire): Promise<{ channel_id: string }> {
    return this.request("POST", "/api/partyline/join", { invite });
  }

  declinePartyLine(invite: PartyLineInviteWire): Promise<{ declined: boolean }> {
    return this.request("POST", "/api/partyline/decline", { invite });
  }

  startPartyLine(participants: string[]): Promise<{ channel_id: string }> {
    return this.request("POST", "/api/partyline/start", { participants });
  }

  sayPartyLine(channelId: string, text: string): Promise<{ ok: boolean }> {
    return this.request("POST", "/api/partyline/say", {
      channel_id: channelId,
      text,
    });
  }

  partyLineLog(channelId: string): Promise<{
    messages: { channel_id: string; from: string; text: string }[];
  }> {
    return this.request(
      "GET",
      `/api/partyline/${encodeURIComponent(channelId)}/log`,
    );
  }

  formView(messageId: string): Promise<FormView> {
    return this.request("GET", `/api/forms/${encodeURIComponent(messageId)}`);
  }

  signOffForm(messageId: string): Promise<SignoffResult> {
    return this.request("POST", "/api/forms/signoff", { message_id: messageId });
  }

  plugins(): Promise<{ plugins: PluginEntry[] }> {
    return this.request("GET", "/api/plugins");
  }

  installPlugin(
    manifest: PluginManifestWire,
    approved: boolean,
  ): Promise<{ installed: { name: string; version: string; form_type: string } }> {
    return this.request("POST", "/api/plugins/install", { manifest, approved });
  }

  fetchAttachment(
    ticket: AttachmentTicketWire,
  ): Promise<{ data: string; size: number }> {
    return this.request("POST", "/api/fetch", { ticket });
  }
}
