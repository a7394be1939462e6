import { describe, expect, it } from "vitest";

import { decodeMidiBytes } from "../src/midi_in.js";

describe("local midi decoding", () => {
  it("forwards note ons with velocity", () => {
    expect(decodeMidiBytes([0x90, 60, 80])).toBe("note_on 60 80");
    expect(decodeMidiBytes([0x95, 72, 1])).toBe("note_on 72 1");
  });

  it("treats zero velocity note on as note off", () => {
    expect(decodeMidiBytes([0x90, 60, 0])).toBe("note_off 60");
  });

  it("forwards note offs", () => {
    expect(decodeMidiBytes([0x80, 60, 64])).toBe("note_off 60");
  });

  it("forwards control changes as pedal records", () => {
    expect(decodeMidiBytes([0xb0, 64, 127])).toBe("pedal 64 127");
    expect(decodeMidiBytes([0xb0, 67, 0])).toBe("pedal 67 0");
  });

  it("ignores everything else", () => {
    expect(decodeMidiBytes([0xf8])).toBeNull();
    expect(decodeMidiBytes([0xe0, 0, 64])).toBeNull();
    expect(decodeMidiBytes([])).toBeNull();
  });
});
