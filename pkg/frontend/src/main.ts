/** Browser entry point: wires the socket, the views, and the inputs.
 *
 * Everything musical lives on the server; this file only forwards
 * input lines and draws whatever the session view says.
 */

import { GatewayClient } from "./client.js";
import { KeyboardInput } from "./keyboard.js";
import { attachMidiInputs } from "./midi_in.js";
import {
  parseRecord,
  noteOn,
  noteOff,
  pedal,
  PING,
  SUSTAIN_CONTROLLER,
} from "./protocol.js";
import { layoutRoll, PITCH_LO, PITCH_HI } from "./roll.js";
import {
  apply,
  newSessionView,
  pedalAction,
  setConnection,
  TakeoverSwitch,
} from "./state.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing #${id}`);
  return el as T;
};

const statusDot = $("status-dot");
const statusText = $("status-text");
const phaseEl = $("phase");
const noticeEl = $("notice");
const metricsEl = $("metrics");
const reportEl = $("report");
const pedalBtn = $<HTMLButtonElement>("pedal-btn");
const sustainBtn = $<HTMLButtonElement>("sustain-btn");
const velSlider = $<HTMLInputElement>("velocity");
const velLabel = $("velocity-label");
const octaveLabel = $("octave-label");
const midiEl = $("midi");
const keysEl = $("keys");
const canvas = $<HTMLCanvasElement>("roll");

const view = newSessionView();
const kb = new KeyboardInput();
const takeoverSwitch = new TakeoverSwitch();

const proto = location.protocol === "https:" ? "wss" : "ws";
const client = new GatewayClient(`${proto}://${location.host}/ws`, "performer");

// server clock extrapolation between messages
let clockAnchorMs = 0;
let clockAnchorLocal = performance.now();

function renderNowMs(): number {
  return clockAnchorMs + (performance.now() - clockAnchorLocal);
}

client.onStatus = (status) => {
  setConnection(view, status);
  statusDot.dataset.state = status;
  statusText.textContent = status;
  if (status !== "open") {
    kb.releaseAll();
    clearScreenKeys();
  }
  renderText();
};

client.onRecord = (line) => {
  const rec = parseRecord(line);
  const before = view.clockMs;
  apply(view, rec);
  if (rec.kind === "state") takeoverSwitch.sync(rec.phase);
  if (view.clockMs !== before) {
    clockAnchorMs = view.clockMs;
    clockAnchorLocal = performance.now();
  }
  renderText();
};

function send(line: string): void {
  client.send(line);
}

// -- text panels ---------------------------------------------------------------

const PHASE_LABEL = {
  listen: "listening",
  finalizing: "finalizing",
  generating: "generating",
} as const;

function renderText(): void {
  phaseEl.textContent = PHASE_LABEL[view.phase];
  phaseEl.dataset.phase = view.phase;

  const action = pedalAction(view.phase);
  pedalBtn.textContent =
    action === "takeover" ? "take over" : action === "reclaim" ? "hand back" : "switching…";
  pedalBtn.dataset.phase = view.phase;

  noticeEl.textContent = view.lastNotice ?? "";

  const bits: string[] = [];
  if (view.role !== null) bits.push(`role ${view.role}`);
  bits.push(view.pedalDown ? "sustain down" : "sustain up");
  if (view.gapCount > 0) bits.push(`${view.gapCount} msg dropped`);
  metricsEl.textContent = bits.join(" · ");

  const r = view.lastReport;
  if (r === null) {
    reportEl.textContent = "no takeover yet";
  } else {
    const sound =
      r.firstNoteSoundMs < 0 ? "no note" : `${(r.firstNoteSoundMs - r.signalMs).toFixed(0)} ms to sound`;
    reportEl.textContent =
      `turn ${r.turn}: ${r.hanging} hanging, ` +
      `${(r.finalizeMs - r.signalMs).toFixed(0)} ms to finalize, ` +
      `${(r.firstTokenMs - r.signalMs).toFixed(0)} ms to first token, ${sound}`;
  }
}

// -- piano roll ----------------------------------------------------------------

const ctx = canvas.getContext("2d");

function hatchPattern(color: string): CanvasPattern | null {
  if (ctx === null) return null;
  const tile = document.createElement("canvas");
  tile.width = 6;
  tile.height = 6;
  const tc = tile.getContext("2d");
  if (tc === null) return null;
  tc.strokeStyle = color;
  tc.lineWidth = 1.5;
  tc.beginPath();
  tc.moveTo(-1, 7);
  tc.lineTo(7, -1);
  tc.stroke();
  return ctx.createPattern(tile, "repeat");
}

const COLOR_HUMAN = "#4fd6be";
const COLOR_AI = "#ff9e64";
const hatchAi = hatchPattern(COLOR_AI);
const SPAN_MS = 12_000;

function drawRoll(): void {
  if (ctx === null) return;
  const dpr = window.devicePixelRatio || 1;
  const w = canvas.clientWidth;
  const h = canvas.clientHeight;
  if (canvas.width !== w * dpr || canvas.height !== h * dpr) {
    canvas.width = w * dpr;
    canvas.height = h * dpr;
  }
  ctx.setTransform(dpr, 0, 0, dpr, 0, 0);
  ctx.clearRect(0, 0, w, h);

  // octave guides
  ctx.strokeStyle = "rgba(255,255,255,0.06)";
  ctx.lineWidth = 1;
  const rowH = h / (PITCH_HI - PITCH_LO + 1);
  for (let p = PITCH_LO; p <= PITCH_HI; p++) {
    if (p % 12 !== 0) continue;
    const y = (PITCH_HI - p) * rowH;
    ctx.beginPath();
    ctx.moveTo(0, y);
    ctx.lineTo(w, y);
    ctx.stroke();
  }

  const rects = layoutRoll(view.roll, renderNowMs(), {
    width: w,
    height: h,
    spanMs: SPAN_MS,
  });
  for (const r of rects) {
    if (r.dropped) {
      ctx.fillStyle = hatchAi ?? COLOR_AI;
      ctx.fillRect(r.x, r.y, r.w, r.h);
      ctx.strokeStyle = COLOR_AI;
      ctx.strokeRect(r.x + 0.5, r.y + 0.5, Math.max(r.w - 1, 1), Math.max(r.h - 1, 1));
    } else {
      ctx.fillStyle = r.source === "human" ? COLOR_HUMAN : COLOR_AI;
      ctx.globalAlpha = r.open ? 1.0 : 0.85;
      ctx.fillRect(r.x, r.y, r.w, r.h);
      ctx.globalAlpha = 1.0;
    }
  }
}

function frame(): void {
  drawRoll();
  requestAnimationFrame(frame);
}

// -- on-screen keyboard --------------------------------------------------------

const SCREEN_LO = 48;
const SCREEN_HI = 84;
const BLACK = new Set([1, 3, 6, 8, 10]);
const keyByPitch = new Map<number, HTMLDivElement>();
const screenDown = new Set<number>();

function buildKeys(): void {
  for (let p = SCREEN_LO; p <= SCREEN_HI; p++) {
    const key = document.createElement("div");
    key.className = BLACK.has(p % 12) ? "key black" : "key white";
    key.dataset.pitch = String(p);
    keysEl.appendChild(key);
    keyByPitch.set(p, key);
  }
}

function pressScreenKey(pitch: number): void {
  if (screenDown.has(pitch)) return;
  screenDown.add(pitch);
  send(noteOn(pitch, kb.velocity));
  keyByPitch.get(pitch)?.classList.add("down");
}

function releaseScreenKey(pitch: number): void {
  if (!screenDown.delete(pitch)) return;
  send(noteOff(pitch));
  keyByPitch.get(pitch)?.classList.remove("down");
}

function clearScreenKeys(): void {
  for (const pitch of [...screenDown]) {
    screenDown.delete(pitch);
    keyByPitch.get(pitch)?.classList.remove("down");
  }
}

function pitchOfTarget(t: EventTarget | null): number | null {
  if (!(t instanceof HTMLElement)) return null;
  const raw = t.dataset.pitch;
  if (raw === undefined) return null;
  return Number(raw);
}

keysEl.addEventListener("pointerdown", (ev) => {
  const pitch = pitchOfTarget(ev.target);
  if (pitch === null) return;
  ev.preventDefault();
  pressScreenKey(pitch);
});
window.addEventListener("pointerup", () => {
  for (const pitch of [...screenDown]) releaseScreenKey(pitch);
});
keysEl.addEventListener("pointerleave", () => {
  for (const pitch of [...screenDown]) releaseScreenKey(pitch);
});

// -- computer keyboard ---------------------------------------------------------

function highlight(pitch: number, down: boolean): void {
  keyByPitch.get(pitch)?.classList.toggle("down", down);
}

window.addEventListener("keydown", (ev) => {
  if (ev.target instanceof HTMLInputElement) return;
  const action = kb.keyDown(ev.code);
  if (action === null) return;
  ev.preventDefault();
  switch (action.kind) {
    case "note_on":
      send(noteOn(action.pitch, action.velocity));
      highlight(action.pitch, true);
      break;
    case "footswitch_down":
      send(takeoverSwitch.press());
      break;
    case "octave":
      octaveLabel.textContent = action.shift === 0 ? "octave 0" : `octave ${action.shift > 0 ? "+" : ""}${action.shift}`;
      break;
    default:
      break;
  }
});

window.addEventListener("keyup", (ev) => {
  const action = kb.keyUp(ev.code);
  if (action === null) return;
  if (action.kind === "note_off") {
    send(noteOff(action.pitch));
    highlight(action.pitch, false);
  }
});

window.addEventListener("blur", () => {
  for (const action of kb.releaseAll()) {
    if (action.kind === "note_off") {
      send(noteOff(action.pitch));
      highlight(action.pitch, false);
    }
  }
  for (const pitch of [...screenDown]) releaseScreenKey(pitch);
});

// -- controls ------------------------------------------------------------------

pedalBtn.addEventListener("click", () => {
  send(takeoverSwitch.press());
});

sustainBtn.addEventListener("pointerdown", () => {
  send(pedal(SUSTAIN_CONTROLLER, 127));
  sustainBtn.classList.add("down");
});
const sustainUp = (): void => {
  if (!sustainBtn.classList.contains("down")) return;
  send(pedal(SUSTAIN_CONTROLLER, 0));
  sustainBtn.classList.remove("down");
};
sustainBtn.addEventListener("pointerup", sustainUp);
sustainBtn.addEventListener("pointerleave", sustainUp);

velSlider.addEventListener("input", () => {
  kb.velocity = Number(velSlider.value);
  velLabel.textContent = `velocity ${velSlider.value}`;
});

// -- boot ----------------------------------------------------------------------

buildKeys();
renderText();
client.connect();
requestAnimationFrame(frame);
setInterval(() => send(PING), 2000);

void attachMidiInputs(send, (names) => {
  midiEl.textContent = names.length > 0 ? `midi: ${names.join(", ")}` : "midi: none";
}).then((ok) => {
  if (!ok) midiEl.textContent = "midi: unavailable";
});
