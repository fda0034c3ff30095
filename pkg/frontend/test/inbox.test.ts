import { describe, expect, it } from "vitest";
import { badgesForFlags, inboxRows } from "../src/inbox.js";
import type { InboxHeader } from "../src/types.js";

describe("inbox view model", () => {
  it("maps flags to badges one-to-one", () => {
    expect(badgesForFlags([])).toEqual([]);
    expect(badgesForFlags(["HAS_FORM"])).toEqual(["form"]);
    expect(badgesForFlags(["INSTANT", "HAS_ONDEMAND"])).toEqual([
      "instant",
      "on-demand",
    ]);
    expect(badgesForFlags(["HAS_FORM", "HAS_ONDEMAND", "INSTANT"])).toEqual([
      "form",
      "instant",
      "on-demand",
    ]);
  });

  it("builds rows newest-first", () => {
    const headers: InboxHeader[] = [
      { message_id: "a", from: "x@y", subject: "old", sent_at: 1, flags: [] },
      {
        message_id: "b",
        from: "z@y",
        subject: "new",
        sent_at: 2,
        flags: ["HAS_FORM"],
      },
    ];
    const rows = inboxRows(headers);
    expect(rows.map((r) => r.subject)).toEqual(["new", "old"]);
    expect(rows[0].badges).toEqual(["form"]);
    expect(rows[1].badges).toEqual([]);
  });

  it("empty mailbox yields an empty view", () => {
    expect(inboxRows([])).toEqual([]);
  });
});
