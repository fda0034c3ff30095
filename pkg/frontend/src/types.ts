/** Wire types for the agent's local HTTP API (docs/local-api.md). */

export type Flag = "INSTANT" | "HAS_FORM" | "HAS_ONDEMAND";

export interface InboxHeader {
  message_id: string;
  from: string;
  subject: string;
  sent_at: number;
  flags: Flag[];
}

export interface SignatureBlockWire {
  signer: string;
  role: string;
  key_id: string;
  algorithm: string;
  signed_at: number;
  sig: string;
}

export interface AttachmentTicketWire {
  guid: string;
  size: number;
  description: string;
  hash: { alg: string; digest: string };
  origin: string;
}

export interface EnvelopeWire {
  message_id: string;
  from: string;
  to: string[];
  subject: string;
  sent_at: number;
  body: { content_type: string; data: string }[];
  flags: Flag[];
  attachments: AttachmentTicketWire[];
  headers: [string, unknown][];
  signatures: SignatureBlockWire[];
}

export interface SendRequest {
  to: string[];
  subject?: string;
  body?: string;
  instant?: boolean;
  attachments?: { description: string; data: string }[];
}

export interface SendReceipt {
  message_id: string;
  queued: string[];
  delivered_local: string[];
}

export interface PartyLineInviteWire {
  channel_id: string;
  broker: [string, number];
  participants: string[];
  initiated_by: string;
  expires_at: number;
}

export interface RouteStepWire {
  approver: string;
  delegates: string[];
}

export interface ApprovalWire {
  signature: SignatureBlockWire;
  principal: string;
}

export interface PluginManifestWire {
  name: string;
  version: string;
  fetch_url: string;
  code_hash: string;
  publisher_key_id: string;
  signature: SignatureBlockWire;
}

export interface RoutedFormWire {
  form_type: string;
  schema_version: string;
  payload: Record<string, unknown>;
  route: RouteStepWire[];
  approvals: ApprovalWire[];
  manifest?: PluginManifestWire;
}

export interface LayoutHint {
  widget: string;
  field: string;
  label?: string;
}

export interface FormView {
  message_id: string;
  form: RoutedFormWire;
  complete: boolean;
  next_approver: string | null;
  my_turn: boolean;
  computed: Record<string, number>;
  layout: LayoutHint[];
}

export interface SignoffResult {
  form: RoutedFormWire;
  forwarded_to: string;
  receipt: SendReceipt;
}

export interface PluginEntry {
  name: string;
  version: string;
  publisher: string;
  installed: boolean;
  approved: boolean;
}

export type PushEvent =
  | { kind: "message"; envelope: EnvelopeWire }
  | { kind: "invite"; invite: PartyLineInviteWire }
  | { kind: "partyline"; channel_id: string; from: string; text: string };

export interface ApiError {
  error: string;
  detail: string;
}
