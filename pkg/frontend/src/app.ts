/** DOM wiring: renders the view models and forwards every user action
 * to the typed API client. All state transitions happen agent-side;
 * the only optimistic UI is marking a row read. */

import { ApiClient, ApiCallError } from "./api.js";
import { formViewModel } from "./forms.js";
import { ImStream, chatLine, type StreamState } from "./im.js";
import { inboxRows, type InboxRow } from "./inbox.js";
import { approvalDialog, decide, needsApproval } from "./plugins.js";
import type {
  AttachmentTicketWire,
  EnvelopeWire,
  PartyLineInviteWire,
  PushEvent,
} from "./types.js";

const api = new ApiClient();

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function byId(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node;
}

function showError(err: unknown): void {
  const banner = byId("banner");
  banner.textContent =
    err instanceof ApiCallError ? `${err.code}: ${err.detail}` : String(err);
  banner.classList.remove("hidden");
  setTimeout(() => banner.classList.add("hidden"), 6000);
}

// --------------------------------------------------------------- inbox

async function refreshInbox(): Promise<void> {
  try {
    const { headers } = await api.inbox();
    renderInbox(inboxRows(headers));
  } catch (err) {
    byId("banner").textContent = "agent API unreachable";
    byId("banner").classList.remove("hidden");
    throw err;
  }
}

function renderInbox(rows: InboxRow[]): void {
  const list = byId("inbox");
  list.replaceChildren();
  if (rows.length === 0) {
    list.append(el("p", "empty", "No messages."));
    return;
  }
  for (const row of rows) {
    const item = el("div", "row");
    item.append(el("span", "from", row.from));
    const subject = el("span", "subject", row.subject);
    for (const badge of row.badges) {
      subject.append(el("span", `badge badge-${badge}`, badge));
    }
    item.append(subject);
    item.append(el("span", "date", new Date(row.sentAt).toLocaleString()));
    item.onclick = () => void openMessage(row.messageId).catch(showError);
    list.append(item);
  }
}

async function openMessage(messageId: string): Promise<void> {
  const { envelope } = await api.retrieve(messageId);
  const pane = byId("reading");
  pane.replaceChildren();
  pane.append(el("h3", undefined, envelope.subject));
  pane.append(el("p", "meta", `from ${envelope.from} to ${envelope.to.join(", ")}`));
  const part = envelope.body[0];
  pane.append(el("pre", "body", part ? atob(part.data) : ""));
  for (const ticket of envelope.attachments) {
    const button = el(
      "button",
      undefined,
      `fetch ${ticket.description} (${ticket.size} bytes)`,
    );
    button.onclick = () => void fetchAttachment(ticket).catch(showError);
    pane.append(button);
  }
  if (envelope.flags.includes("HAS_FORM")) {
    await renderForm(messageId, pane);
  }
  const remove = el("button", "danger", "delete");
  remove.onclick = () =>
    void api
      .delete(messageId)
      .then(() => {
        pane.replaceChildren();
        return refreshInbox();
      })
      .catch(showError);
  pane.append(remove);
}

async function fetchAttachment(ticket: AttachmentTicketWire): Promise<void> {
  const { data } = await api.fetchAttachment(ticket);
  const bytes = Uint8Array.from(atob(data), (c) => c.charCodeAt(0));
  const url = URL.createObjectURL(new Blob([bytes]));
  const link = el("a", undefined, `save ${ticket.description}`);
  link.setAttribute("href", url);
  link.setAttribute("download", ticket.description);
  byId("reading").append(link);
}

// --------------------------------------------------------------- forms

async function renderForm(messageId: string, pane: HTMLElement): Promise<void> {
  const view = await api.formView(messageId);
  const { plugins } = await api.plugins();
  const pending = needsApproval(view, plugins);
  if (pending) {
    const dialog = approvalDialog(pending);
    const box = el("div", "dialog");
    box.append(el("h4", undefined, `Install form package ${dialog.name}?`));
    box.append(el("p", undefined, `version ${dialog.version}`));
    box.append(el("p", "mono", `publisher key ${dialog.publisherKeyId}`));
    box.append(el("p", "mono", `artifact sha256 ${dialog.codeHash}`));
    const approve = el("button", undefined, "approve");
    const refuse = el("button", "danger", "decline");
    approve.onclick = () =>
      void decide(api, pending, true)
        .then(() => openMessage(messageId))
        .catch(showError);
    refuse.onclick = () =>
      void decide(api, pending, false)
        .then(() => box.remove())
        .catch(showError);
    box.append(approve, refuse);
    pane.append(box);
    return;
  }
  const model = formViewModel(view);
  const section = el("div", "form");
  section.append(el("h4", undefined, `${model.formType} — ${model.status}`));
  for (const widget of model.widgets) {
    const line = el("p", `widget widget-${widget.widget}`);
    line.append(el("span", "label", `${widget.label}: `));
    line.append(el("span", "value", widget.value));
    section.append(line);
  }
  for (const approval of model.approvals) {
    section.append(
      el(
        "p",
        "approval",
        `signed by ${approval.signer} for ${approval.principal}`,
      ),
    );
  }
  const signOff = el("button", undefined, "sign off");
  signOff.disabled = !model.signOffEnabled;
  signOff.onclick = () =>
    void api
      .signOffForm(messageId)
      .then(() => refreshInbox())
      .catch(showError);
  section.append(signOff);
  pane.append(section);
}

// -------------------------------------------------------------- compose

function wireCompose(): void {
  const form = byId("compose") as HTMLFormElement;
  form.onsubmit = (ev) => {
    ev.preventDefault();
    const to = (byId("compose-to") as HTMLInputElement).value
      .split(",")
      .map((a) => a.trim())
      .filter(Boolean);
    const subject = (byId("compose-subject") as HTMLInputElement).value;
    const body = (byId("compose-body") as HTMLTextAreaElement).value;
    const instant = (byId("compose-instant") as HTMLInputElement).checked;
    void api
      .send({ to, subject, body, instant })
      .then(() => {
        form.reset();
        return refreshInbox();
      })
      .catch(showError);
  };
}

// ------------------------------------------------------------------ im

function renderStreamState(state: StreamState): void {
  const badge = byId("stream-state");
  badge.textContent = state === "open" ? "live" : state;
  badge.className = `stream-${state}`;
}

function onPush(event: PushEvent): void {
  const log = byId("chat");
  if (event.kind === "message") {
    const line = chatLine(event.envelope as EnvelopeWire);
    log.append(el("p", "chat-line", `${line.from}: ${line.text}`));
    void refreshInbox().catch(() => undefined);
  } else if (event.kind === "partyline") {
    log.append(
      el("p", "chat-line partyline", `[${event.channel_id}] ${event.from}: ${event.text}`),
    );
  } else if (event.kind === "invite") {
    renderInvite(event.invite);
  }
}

function renderInvite(invite: PartyLineInviteWire): void {
  const box = el("div", "dialog");
  box.append(
    el(
      "p",
      undefined,
      `${invite.initiated_by} invites you to a party line with ` +
        invite.participants.join(", "),
    ),
  );
  const accept = el("button", undefined, "join");
  const refuse = el("button", "danger", "decline");
  accept.onclick = () =>
    void api
      .joinPartyLine(invite)
      .then(() => box.remove())
      .catch(showError);
  refuse.onclick = () =>
    void api
      .declinePartyLine(invite)
      .then(() => box.remove())
      .catch(showError);
  box.append(accept, refuse);
  byId("chat").append(box);
}

function wireChatSend(): void {
  const form = byId("chat-send") as HTMLFormElement;
  form.onsubmit = (ev) => {
    ev.preventDefault();
    const channel = (byId("chat-channel") as HTMLInputElement).value.trim();
    const text = (byId("chat-text") as HTMLInputElement).value;
    const action = channel
      ? api.sayPartyLine(channel, text)
      : api
          .send({
            to: (byId("chat-peer") as HTMLInputElement).value
              .split(",")
              .map((a) => a.trim())
              .filter(Boolean),
            body: text,
            instant: true,
          })
          .then(() => undefined);
    void action
      .then(() => {
        (byId("chat-text") as HTMLInputElement).value = "";
      })
      .catch(showError);
  };
}

// ---------------------------------------------------------------- boot

export function main(): void {
  wireCompose();
  wireChatSend();
  const stream = new ImStream(onPush, renderStreamState);
  stream.start();
  void api
    .whoami()
    .then(({ address }) => {
      byId("whoami").textContent = address;
    })
    .catch(showError);
  void refreshInbox().catch(showError);
}

main();
