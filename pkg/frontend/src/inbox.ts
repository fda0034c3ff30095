/** Inbox view model: one row per header, badges derived one-to-one
 * from envelope flags. */

import type { Flag, InboxHeader } from "./types.js";

export type Badge = "form" | "on-demand" | "instant";

const BADGE_FOR_FLAG: Record<Flag, Badge> = {
  HAS_FORM: "form",
  HAS_ONDEMAND: "on-demand",
  INSTANT: "instant",
};

export interface InboxRow {
  messageId: string;
  from: string;
  subject: string;
  sentAt: number;
  badges: Badge[];
}

export function badgesForFlags(flags: Flag[]): Badge[] {
  return flags
    .filter((f): f is Flag => f in BADGE_FOR_FLAG)
    .map((f) => BADGE_FOR_FLAG[f])
    .sort();
}

export function inboxRows(headers: InboxHeader[]): InboxRow[] {
  return headers
    .map((h) => ({
      messageId: h.message_id,
      from: h.from,
      subject: h.subject,
      sentAt: h.sent_at,
      badges: badgesForFlags(h.flags ?? []),
    }))
    .sort((a, b) => b.sentAt - a.sentAt);
}
