/** Session view state: a pure reducer over server records.
 *
 * The server is the only musical authority. This module just folds its
 * records into something drawable: a time-ordered piano roll, the phase,
 * the last takeover report, and connection bookkeeping. Entries with
 * equal onsets keep server message order (inserts are stable).
 */

import type { Phase, ServerRecord } from "./protocol.js";

export type NoteSource = "human" | "ai";

export type RollEntry = {
  pitch: number;
  velocity: number;
  onMs: number;
  /** null while the note is still sounding */
  offMs: number | null;
  source: NoteSource;
  dropped: boolean;
};

export type TakeoverInfo = {
  turn: number;
  signalMs: number;
  hanging: number;
  finalizeMs: number;
  firstTokenMs: number;
  /** -1 when the turn produced no sounded note */
  firstNoteSoundMs: number;
};

export type ConnectionStatus = "connecting" | "open" | "closed";

export type SessionView = {
  phase: Phase;
  role: "performer" | "observer" | null;
  connection: ConnectionStatus;
  /** latest server-stamped event time seen on this connection */
  clockMs: number;
  roll: RollEntry[];
  lastReport: TakeoverInfo | null;
  lastNotice: string | null;
  /** messages the server dropped from our outbox, cumulative */
  gapCount: number;
  pedalDown: boolean;
  lastError: string | null;
  /** roll retention horizon */
  windowMs: number;
};

export function newSessionView(windowMs = 60_000): SessionView {
  return {
    phase: "listen",
    role: null,
    connection: "connecting",
    clockMs: 0,
    roll: [],
    lastReport: null,
    lastNotice: null,
    gapCount: 0,
    pedalDown: false,
    lastError: null,
    windowMs,
  };
}

/** Insert keeping onMs non-decreasing; ties stay in arrival order. */
function insertSorted(roll: RollEntry[], entry: RollEntry): void {
  let lo = 0;
  let hi = roll.length;
  while (lo < hi) {
    const mid = (lo + hi) >> 1;
    const probe = roll[mid];
    if (probe !== undefined && probe.onMs <= entry.onMs) lo = mid + 1;
    else hi = mid;
  }
  roll.splice(lo, 0, entry);
}

function bumpClock(view: SessionView, at: number): void {
  if (at > view.clockMs) view.clockMs = at;
}

function prune(view: SessionView): void {
  const horizon = view.clockMs - view.windowMs;
  if (horizon <= 0) return;
  // open notes are never pruned, whatever their age
  view.roll = view.roll.filter((e) => e.offMs === null || e.offMs >= horizon);
}

function lastOpenIndex(roll: RollEntry[], pitch: number, source: NoteSource): number {
  for (let i = roll.length - 1; i >= 0; i--) {
    const e = roll[i];
    if (e !== undefined && e.pitch === pitch && e.source === source && e.offMs === null) {
      return i;
    }
  }
  return -1;
}

export function apply(view: SessionView, rec: ServerRecord): SessionView {
  switch (rec.kind) {
    case "role":
      view.role = rec.role;
      break;
    case "state":
      view.phase = rec.phase;
      break;
    case "human_note_on": {
      bumpClock(view, rec.at);
      insertSorted(view.roll, {
        pitch: rec.pitch,
        velocity: rec.velocity,
        onMs: rec.at,
        offMs: null,
        source: "human",
        dropped: false,
      });
      break;
    }
    case "human_note": {
      // authoritative close: adopt the tracked onset and duration
      const offMs = rec.onset + rec.duration;
      bumpClock(view, offMs);
      const i = lastOpenIndex(view.roll, rec.pitch, "human");
      if (i >= 0) {
        const open = view.roll[i];
        if (open !== undefined) {
          view.roll.splice(i, 1);
          open.onMs = rec.onset;
          open.velocity = rec.velocity;
          open.offMs = offMs;
          insertSorted(view.roll, open);
          break;
        }
      }
      // no live onset seen (joined mid-note, or a gap ate it)
      insertSorted(view.roll, {
        pitch: rec.pitch,
        velocity: rec.velocity,
        onMs: rec.onset,
        offMs,
        source: "human",
        dropped: false,
      });
      break;
    }
    case "human_pedal":
      bumpClock(view, rec.at);
      view.pedalDown = rec.on;
      break;
    case "ai_note":
      insertSorted(view.roll, {
        pitch: rec.pitch,
        velocity: rec.velocity,
        onMs: rec.targetOn,
        offMs: rec.targetOff,
        source: "ai",
        dropped: false,
      });
      break;
    case "dropped_note": {
      for (let i = view.roll.length - 1; i >= 0; i--) {
        const e = view.roll[i];
        if (
          e !== undefined &&
          e.source === "ai" &&
          e.pitch === rec.pitch &&
          !e.dropped &&
          Math.abs(e.onMs - rec.target) < 0.5
        ) {
          e.dropped = true;
          break;
        }
      }
      break;
    }
    case "wire":
      bumpClock(view, rec.at);
      break;
    case "takeover_report":
      view.lastReport = {
        turn: rec.turn,
        signalMs: rec.signal,
        hanging: rec.hanging,
        finalizeMs: rec.finalizeMs,
        firstTokenMs: rec.firstTokenMs,
        firstNoteSoundMs: rec.firstNoteSoundMs,
      };
      bumpClock(view, rec.signal);
      break;
    case "notice":
      view.lastNotice = rec.name;
      break;
    case "pong":
    case "hb":
      bumpClock(view, rec.now);
      break;
    case "gap":
      view.gapCount += rec.count;
      break;
    case "error":
      view.lastError = rec.text;
      break;
    case "unknown":
      break;
  }
  prune(view);
  return view;
}

export function setConnection(view: SessionView, status: ConnectionStatus): SessionView {
  view.connection = status;
  if (status !== "open") view.role = null;
  return view;
}

/** What the footswitch means right now. Finalizing is a dead zone. */
export function pedalAction(phase: Phase): "takeover" | "reclaim" | null {
  switch (phase) {
    case "listen":
      return "takeover";
    case "generating":
      return "reclaim";
    case "finalizing":
      return null;
  }
}

/** Decides what a footswitch press sends.
 *
 * Mapping purely from the last-seen phase would race the state
 * broadcast: a rapid double press could send takeover twice because
 * the first transition has not echoed back yet. So each press flips
 * to the opposite control, and every state broadcast resyncs the
 * switch to ground truth. A double press is then always exactly
 * takeover followed by reclaim, one message per press.
 */
export class TakeoverSwitch {
  private next: "takeover" | "reclaim" = "takeover";

  press(): "takeover" | "reclaim" {
    const action = this.next;
    this.next = action === "takeover" ? "reclaim" : "takeover";
    return action;
  }

  sync(phase: Phase): void {
    this.next = phase === "listen" ? "takeover" : "reclaim";
  }
}
