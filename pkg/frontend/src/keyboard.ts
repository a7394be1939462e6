/** Computer-keyboard piano input.
 *
 * Tracks held keys itself so OS auto-repeat never retriggers a note:
 * a key only fires on its down edge and frees on its up edge. Pitches
 * are remembered per held key, so shifting octaves mid-hold still
 * releases the note that was actually struck.
 */

export type KeyAction =
  | { kind: "note_on"; pitch: number; velocity: number }
  | { kind: "note_off"; pitch: number }
  | { kind: "footswitch_down" }
  | { kind: "footswitch_up" }
  | { kind: "octave"; shift: number };

// one DAW-style octave: A row carries the white keys, W row the blacks
const KEY_TO_SEMITONE: Readonly<Record<string, number>> = {
  KeyA: 0,
  KeyW: 1,
  KeyS: 2,
  KeyE: 3,
  KeyD: 4,
  KeyF: 5,
  KeyT: 6,
  KeyG: 7,
  KeyY: 8,
  KeyH: 9,
  KeyU: 10,
  KeyJ: 11,
  KeyK: 12,
};

const BASE_PITCH = 60;
const PITCH_MIN = 21;
const PITCH_MAX = 108;
const SHIFT_MIN = -3;
const SHIFT_MAX = 3;

export class KeyboardInput {
  velocity = 80;
  private held = new Map<string, number>();
  private footswitch = false;
  private shift = 0;

  get octaveShift(): number {
    return this.shift;
  }

  /** Handle a physical key-down. Returns null for repeats and dead keys. */
  keyDown(code: string): KeyAction | null {
    if (code === "Space") {
      if (this.footswitch) return null;
      this.footswitch = true;
      return { kind: "footswitch_down" };
    }
    if (code === "KeyZ" || code === "KeyX") {
      const next = this.shift + (code === "KeyZ" ? -1 : 1);
      if (next < SHIFT_MIN || next > SHIFT_MAX) return null;
      this.shift = next;
      return { kind: "octave", shift: this.shift };
    }
    const semi = KEY_TO_SEMITONE[code];
    if (semi === undefined) return null;
    if (this.held.has(code)) return null;
    const pitch = BASE_PITCH + this.shift * 12 + semi;
    if (pitch < PITCH_MIN || pitch > PITCH_MAX) return null;
    this.held.set(code, pitch);
    return { kind: "note_on", pitch, velocity: this.velocity };
  }

  /** Handle a physical key-up. */
  keyUp(code: string): KeyAction | null {
    if (code === "Space") {
      if (!this.footswitch) return null;
      this.footswitch = false;
      return { kind: "footswitch_up" };
    }
    const pitch = this.held.get(code);
    if (pitch === undefined) return null;
    this.held.delete(code);
    return { kind: "note_off", pitch };
  }

  /** Force everything up (window blur, disconnect). */
  releaseAll(): KeyAction[] {
    const out: KeyAction[] = [];
    for (const pitch of this.held.values()) {
      out.push({ kind: "note_off", pitch });
    }
    this.held.clear();
    if (this.footswitch) {
      this.footswitch = false;
      out.push({ kind: "footswitch_up" });
    }
    return out;
  }
}
