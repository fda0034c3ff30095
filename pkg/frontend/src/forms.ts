/** Declarative form rendering from package layout hints.
 *
 * Layout hints come from the installed form package; the renderer maps
 * each hint to a view-model widget. Unknown widget types degrade to
 * read-only text, so a newer package never breaks an older UI.
 * The sign-off button is enabled only when it is the user's route
 * turn, as reported by the agent.
 */

import type { FormView, LayoutHint } from "./types.js";

const KNOWN_WIDGETS = new Set(["int", "string", "bool", "computed"]);

export interface WidgetModel {
  field: string;
  label: string;
  widget: "int" | "string" | "bool" | "computed" | "readonly-text";
  value: string;
  readonly: boolean;
}

export interface FormViewModel {
  formType: string;
  widgets: WidgetModel[];
  approvals: { signer: string; principal: string; signedAt: number }[];
  routeRemaining: string[];
  signOffEnabled: boolean;
  status: string;
}

function valueText(view: FormView, field: string): string {
  if (field in view.computed) return String(view.computed[field]);
  const v = view.form.payload[field];
  return v === undefined || v === null ? "" : String(v);
}

export function widgetFor(view: FormView, hint: LayoutHint): WidgetModel {
  const known = KNOWN_WIDGETS.has(hint.widget);
  return {
    field: hint.field,
    label: hint.label ?? hint.field,
    widget: known ? (hint.widget as WidgetModel["widget"]) : "readonly-text",
    value: valueText(view, hint.field),
    // received forms are signed history: values are never editable here,
    // and unknown widgets are additionally displayed as plain text
    readonly: true,
  };
}

export function formViewModel(view: FormView): FormViewModel {
  const hints: LayoutHint[] =
    view.layout.length > 0
      ? view.layout
      : // no package installed: degrade every payload field to text
        Object.keys(view.form.payload)
          .sort()
          .map((field) => ({ widget: "unknown", field }));
  const approvals = view.form.approvals.map((a) => ({
    signer: a.signature.signer,
    principal: a.principal,
    signedAt: a.signature.signed_at,
  }));
  const routeRemaining = view.form.route
    .slice(view.form.approvals.length)
    .map((s) => s.approver);
  return {
    formType: view.form.form_type,
    widgets: hints.map((h) => widgetFor(view, h)),
    approvals,
    routeRemaining,
    signOffEnabled: view.my_turn && !view.complete,
    status: view.complete
      ? "fully approved"
      : view.my_turn
        ? "awaiting your sign-off"
        : `awaiting ${view.next_approver ?? "unknown approver"}`,
  };
}
