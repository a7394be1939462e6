/** Local MIDI device input, forwarded verbatim to the gateway.
 *
 * The browser may not expose Web MIDI at all; everything here degrades
 * to a no-op in that case. Decoding is pure so it can be tested
 * without hardware.
 */

import { noteOn, noteOff, pedal } from "./protocol.js";

/** Decode one short MIDI message into a client protocol line. */
export function decodeMidiBytes(data: ArrayLike<number>): string | null {
  const status = data[0];
  if (status === undefined) return null;
  const kind = status & 0xf0;
  const a = data[1] ?? 0;
  const b = data[2] ?? 0;
  if (kind === 0x90) {
    return b > 0 ? noteOn(a, b) : noteOff(a);
  }
  if (kind === 0x80) {
    return noteOff(a);
  }
  if (kind === 0xb0) {
    return pedal(a, b);
  }
  return null;
}

/** Hook every available MIDI input up to `sendLine`. Safe without Web MIDI. */
export async function attachMidiInputs(
  sendLine: (line: string) => void,
  onDevices?: (names: string[]) => void,
): Promise<boolean> {
  if (typeof navigator.requestMIDIAccess !== "function") return false;
  let access: MIDIAccess;
  try {
    access = await navigator.requestMIDIAccess();
  } catch {
    return false;
  }
  const wire = (): void => {
    const names: string[] = [];
    access.inputs.forEach((input) => {
      names.push(input.name ?? "midi input");
      input.onmidimessage = (ev) => {
        const data = ev.data;
        if (data === null) return;
        const line = decodeMidiBytes(data);
        if (line !== null) sendLine(line);
      };
    });
    onDevices?.(names);
  };
  wire();
  access.onstatechange = wire;
  return true;
}
