/** Typed view of the gateway's line protocol.
 *
 * One record per WebSocket message, space-separated fields, times in
 * server milliseconds. Parsing is tolerant: unknown record kinds come
 * back as `unknown` so old clients survive new server fields.
 */

export type Phase = "listen" | "finalizing" | "generating";

export type ServerRecord =
  | { kind: "role"; role: "performer" | "observer" }
  | { kind: "state"; phase: Phase }
  | { kind: "human_note_on"; pitch: number; velocity: number; at: number }
  | { kind: "human_note"; pitch: number; velocity: number; onset: number; duration: number }
  | { kind: "human_pedal"; on: boolean; at: number }
  | { kind: "ai_note"; pitch: number; velocity: number; targetOn: number; targetOff: number }
  | { kind: "wire"; what: "on" | "off" | "cc"; a: number; b: number; at: number }
  | { kind: "dropped_note"; pitch: number; target: number }
  | {
      kind: "takeover_report";
      turn: number;
      signal: number;
      hanging: number;
      finalizeMs: number;
      firstTokenMs: number;
      firstNoteSoundMs: number;
    }
  | { kind: "notice"; name: string }
  | { kind: "pong"; now: number }
  | { kind: "hb"; now: number }
  | { kind: "gap"; count: number }
  | { kind: "error"; text: string }
  | { kind: "unknown"; raw: string };

function num(s: string | undefined): number {
  const v = Number(s);
  if (s === undefined || s === "" || Number.isNaN(v)) {
    throw new Error(`bad number ${s}`);
  }
  return v;
}

export function parseRecord(line: string): ServerRecord {
  const parts = line.split(" ").filter((p) => p.length > 0);
  const head = parts[0];
  if (head === undefined) return { kind: "unknown", raw: line };
  try {
    switch (head) {
      case "role":
        if (parts[1] === "performer" || parts[1] === "observer") {
          return { kind: "role", role: parts[1] };
        }
        break;
      case "state":
        if (parts[1] === "listen" || parts[1] === "finalizing" || parts[1] === "generating") {
          return { kind: "state", phase: parts[1] };
        }
        break;
      case "human_note_on":
        return {
          kind: "human_note_on",
          pitch: num(parts[1]),
          velocity: num(parts[2]),
          at: num(parts[3]),
        };
      case "human_note":
        return {
          kind: "human_note",
          pitch: num(parts[1]),
          velocity: num(parts[2]),
          onset: num(parts[3]),
          duration: num(parts[4]),
        };
      case "human_pedal":
        return { kind: "human_pedal", on: parts[1] === "1", at: num(parts[2]) };
      case "ai_note":
        return {
          kind: "ai_note",
          pitch: num(parts[1]),
          velocity: num(parts[2]),
          targetOn: num(parts[3]),
          targetOff: num(parts[4]),
        };
      case "wire":
        if (parts[1] === "on" || parts[1] === "off" || parts[1] === "cc") {
          return {
            kind: "wire",
            what: parts[1],
            a: num(parts[2]),
            b: num(parts[3]),
            at: num(parts[4]),
          };
        }
        break;
      case "dropped_note":
        return { kind: "dropped_note", pitch: num(parts[1]), target: num(parts[2]) };
      case "takeover_report":
        return {
          kind: "takeover_report",
          turn: num(parts[1]),
          signal: num(parts[2]),
          hanging: num(parts[3]),
          finalizeMs: num(parts[4]),
          firstTokenMs: num(parts[5]),
          firstNoteSoundMs: num(parts[6]),
        };
      case "notice":
        if (parts[1] !== undefined) return { kind: "notice", name: parts[1] };
        break;
      case "pong":
        return { kind: "pong", now: num(parts[1]) };
      case "hb":
        return { kind: "hb", now: num(parts[1]) };
      case "gap":
        return { kind: "gap", count: num(parts[1]) };
      case "error":
        return { kind: "error", text: parts.slice(1).join(" ") };
    }
  } catch {
    return { kind: "unknown", raw: line };
  }
  return { kind: "unknown", raw: line };
}

// -- client -> server ---------------------------------------------------------

export function hello(role: "performer" | "observer"): string {
  return `hello ${role}`;
}

export function noteOn(pitch: number, velocity: number): string {
  return `note_on ${pitch} ${velocity}`;
}

export function noteOff(pitch: number): string {
  return `note_off ${pitch}`;
}

export function pedal(controller: number, value: number): string {
  return `pedal ${controller} ${value}`;
}

export const TAKEOVER = "takeover";
export const RECLAIM = "reclaim";
export const PING = "ping";

export const SUSTAIN_CONTROLLER = 64;
export const SOFT_CONTROLLER = 67;
