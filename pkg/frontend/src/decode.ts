// Chunk payload decoding: base64 -> 8-bit grayscale planes -> canvas-ready
// RGBA buffers. Kept free of DOM types so it runs under node for tests.

import { ChunkMessage, ProtocolError } from "./protocol.js";

export interface DecodedChunk {
  index: number;
  conditionId: number;
  wallMs: number;
  /** One grayscale plane per frame, row-major, length height*width. */
  frames: Uint8Array[];
}

function base64ToBytes(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return Uint8Array.from(Buffer.from(b64, "base64"));
}

export function decodeChunkMessage(msg: ChunkMessage, chunkFrames: number,
                                   height: number, width: number): DecodedChunk {
  let bytes: Uint8Array;
  try {
    bytes = base64ToBytes(msg.frames);
  } catch (err) {
    throw new ProtocolError("bad_payload", `frame payload is not base64: ${String(err)}`);
  }
  const expected = chunkFrames * height * width;
  if (bytes.length !== expected) {
    throw new ProtocolError("bad_payload",
      `expected ${expected} bytes for ${chunkFrames} frames, got ${bytes.length}`);
  }
  const frames: Uint8Array[] = [];
  for (let f = 0; f < chunkFrames; f++) {
    frames.push(bytes.subarray(f * height * width, (f + 1) * height * width));
  }
  return { index: msg.index, conditionId: msg.condition_id, wallMs: msg.wall_ms, frames };
}

/** Expand one grayscale plane to RGBA for ImageData. */
export function grayToRgba(plane: Uint8Array): Uint8ClampedArray<ArrayBuffer> {
  const rgba = new Uint8ClampedArray(new ArrayBuffer(plane.length * 4));
  for (let i = 0; i < plane.length; i++) {
    const v = plane[i]!;
    rgba[i * 4] = v;
    rgba[i * 4 + 1] = v;
    rgba[i * 4 + 2] = v;
    rgba[i * 4 + 3] = 255;
  }
  return rgba;
}

/** Quantize a float frame in [-1, 1] to the transport encoding (for uploads). */
export function quantizeFrame(values: Float32Array): Uint8Array {
  const out = new Uint8Array(values.length);
  for (let i = 0; i < values.length; i++) {
    const q = Math.round((values[i]! + 1) * 127.5);
    out[i] = Math.max(0, Math.min(255, q));
  }
  return out;
}

export function bytesToBase64(bytes: Uint8Array): string {
  if (typeof btoa === "function") {
    let bin = "";
    for (const b of bytes) bin += String.fromCharCode(b);
    return btoa(bin);
  }
  return Buffer.from(bytes).toString("base64");
}
