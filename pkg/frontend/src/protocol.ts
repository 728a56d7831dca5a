// Wire protocol mirror of the server: UTF-8 JSON text messages with monotone
// per-direction sequence numbers. Kept dependency-free; validation is manual.

export interface Start {
  type: "start";
  seq: number;
  condition_id: number;
  num_chunks: number | null;
  seed: number;
  steps: number;
}

export interface SetCondition {
  type: "set_condition";
  seq: number;
  condition_id: number;
}

export interface InjectImage {
  type: "inject_image";
  seq: number;
  frame: string; // base64 8-bit grayscale, row-major
}

export interface Stop {
  type: "stop";
  seq: number;
}

export interface SessionInfo {
  type: "session_info";
  seq: number;
  height: number;
  width: number;
  channels: number;
  chunk_frames: number;
  fps_estimate: number;
  n_conditions: number;
}

export interface ChunkMessage {
  type: "chunk";
  seq: number;
  index: number;
  condition_id: number;
  wall_ms: number;
  frames: string; // base64 of chunk_frames*height*width bytes
}

export interface Ack {
  type: "ack";
  seq: number;
  command: "set_condition" | "inject_image";
  effective_chunk: number;
  condition_id: number;
}

export interface ErrorMessage {
  type: "error";
  seq: number;
  code: string;
  detail: string;
}

export interface End {
  type: "end";
  seq: number;
  total_chunks: number;
  total_frames: number;
}

export type ClientMessage = Start | SetCondition | InjectImage | Stop;
export type ServerMessage = SessionInfo | ChunkMessage | Ack | ErrorMessage | End;
export type Message = ClientMessage | ServerMessage;

export class ProtocolError extends Error {
  constructor(public code: string, public detail: string) {
    super(`${code}: ${detail}`);
  }
}

function isUint(v: unknown): v is number {
  return typeof v === "number" && Number.isInteger(v) && v >= 0;
}

function isBase64(v: unknown): v is string {
  return typeof v === "string" && /^[A-Za-z0-9+/]*={0,2}$/.test(v) && v.length % 4 === 0;
}

export function encode(msg: Message): string {
  return JSON.stringify(msg);
}

export function decodeServerMessage(text: string): ServerMessage {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch (err) {
    throw new ProtocolError("bad_json", String(err));
  }
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new ProtocolError("bad_json", "message must be a JSON object");
  }
  const m = raw as Record<string, unknown>;
  if (!isUint(m.seq)) {
    throw new ProtocolError("bad_seq", `bad sequence number ${String(m.seq)}`);
  }
  switch (m.type) {
    case "session_info":
      if (!isUint(m.height) || !isUint(m.width) || !isUint(m.channels) ||
          !isUint(m.chunk_frames) || m.height === 0 || m.width === 0 ||
          m.chunk_frames === 0 || typeof m.fps_estimate !== "number" ||
          m.fps_estimate < 0 || !isUint(m.n_conditions)) {
        throw new ProtocolError("bad_field", "invalid session_info");
      }
      return m as unknown as SessionInfo;
    case "chunk":
      if (!isUint(m.index) || !isUint(m.condition_id) || !isBase64(m.frames) ||
          typeof m.wall_ms !== "number" || m.wall_ms < 0) {
        throw new ProtocolError("bad_field", "invalid chunk");
      }
      return m as unknown as ChunkMessage;
    case "ack":
      if ((m.command !== "set_condition" && m.command !== "inject_image") ||
          !isUint(m.effective_chunk) || !isUint(m.condition_id)) {
        throw new ProtocolError("bad_field", "invalid ack");
      }
      return m as unknown as Ack;
    case "error":
      if (typeof m.code !== "string" || m.code.length === 0 || typeof m.detail !== "string") {
        throw new ProtocolError("bad_field", "invalid error message");
      }
      return m as unknown as ErrorMessage;
    case "end":
      if (!isUint(m.total_chunks) || !isUint(m.total_frames)) {
        throw new ProtocolError("bad_field", "invalid end");
      }
      return m as unknown as End;
    default:
      throw new ProtocolError("bad_type", `unknown message type ${String(m.type)}`);
  }
}

/** Stamps outgoing client messages with the next sequence number. */
export class SequenceStamper {
  private next = 0;
  take(): number {
    return this.next++;
  }
}

/** Enforces strictly increasing sequence numbers on the incoming direction. */
export class SequenceChecker {
  private last = -1;
  check(msg: ServerMessage): void {
    if (msg.seq <= this.last) {
      throw new ProtocolError("bad_seq", `sequence ${msg.seq} not after ${this.last}`);
    }
    this.last = msg.seq;
  }
}
