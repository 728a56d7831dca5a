// Session state machine: consumes server messages, keeps a ring of decoded
// chunks, tracks pending condition switches and latency/FPS statistics.
// Transport and clock are injected so the logic runs under node for tests.

import { decodeChunkMessage, DecodedChunk } from "./decode.js";
import {
  Ack,
  ChunkMessage,
  decodeServerMessage,
  encode,
  End,
  ErrorMessage,
  ProtocolError,
  SequenceChecker,
  SequenceStamper,
  SessionInfo,
  ServerMessage,
} from "./protocol.js";

export interface Transport {
  send(text: string): void;
  close(): void;
}

export type SessionState = "idle" | "waiting_info" | "streaming" | "ended" | "failed";

export interface ConditionMarker {
  effectiveChunk: number;
  conditionId: number;
}

export interface StartOptions {
  conditionId: number;
  numChunks: number | null;
  seed: number;
  steps: number;
}

const FPS_WINDOW_MS = 5000;

export class SessionView {
  state: SessionState = "idle";
  info: SessionInfo | null = null;
  currentCondition = 0;
  pendingCondition: number | null = null;
  markers: ConditionMarker[] = [];
  latencySeries: number[] = [];
  errorBanner: string | null = null;
  endTotals: { chunks: number; frames: number } | null = null;
  highestChunkIndex = -1;

  private transport: Transport | null = null;
  private stamper = new SequenceStamper();
  private checker = new SequenceChecker();
  private ring: (DecodedChunk | null)[];
  private ringCapacity: number;
  private frameArrivals: number[] = [];
  private framesReceived = 0;
  private now: () => number;
  private log: (line: string) => void;

  constructor(opts: { ringCapacity?: number; now?: () => number;
                      log?: (line: string) => void } = {}) {
    this.ringCapacity = opts.ringCapacity ?? 64;
    this.ring = new Array(this.ringCapacity).fill(null);
    this.now = opts.now ?? (() => Date.now());
    this.log = opts.log ?? (() => undefined);
  }

  attach(transport: Transport): void {
    this.transport = transport;
  }

  start(opts: StartOptions): void {
    if (!this.transport) throw new Error("no transport attached");
    this.currentCondition = opts.conditionId;
    this.state = "waiting_info";
    this.transport.send(encode({
      type: "start",
      seq: this.stamper.take(),
      condition_id: opts.conditionId,
      num_chunks: opts.numChunks,
      seed: opts.seed,
      steps: opts.steps,
    }));
  }

  /** Request a condition switch; pending until acknowledged, last write wins. */
  switchCondition(conditionId: number): void {
    if (!this.transport || this.state !== "streaming") return;
    this.pendingCondition = conditionId;
    this.transport.send(encode({
      type: "set_condition",
      seq: this.stamper.take(),
      condition_id: conditionId,
    }));
  }

  injectImage(frameBase64: string): void {
    if (!this.transport || this.state !== "streaming") return;
    this.transport.send(encode({
      type: "inject_image",
      seq: this.stamper.take(),
      frame: frameBase64,
    }));
  }

  stop(): void {
    if (!this.transport) return;
    this.transport.send(encode({ type: "stop", seq: this.stamper.take() }));
  }

  /** Consume one raw server message. A malformed message raises the error
   * banner and is dropped; the session itself stays alive. */
  handleMessage(text: string): void {
    let msg: ServerMessage;
    try {
      msg = decodeServerMessage(text);
      this.checker.check(msg);
    } catch (err) {
      const detail = err instanceof ProtocolError ? err.message : String(err);
      this.errorBanner = `protocol: ${detail}`;
      this.log(this.errorBanner);
      return;
    }
    switch (msg.type) {
      case "session_info":
        this.info = msg;
        this.state = "streaming";
        return;
      case "chunk":
        this.onChunk(msg);
        return;
      case "ack":
        this.onAck(msg);
        return;
      case "error":
        this.onError(msg);
        return;
      case "end":
        this.onEnd(msg);
        return;
    }
  }

  private onChunk(msg: ChunkMessage): void {
    if (!this.info) {
      this.errorBanner = "chunk before session_info";
      this.log(this.errorBanner);
      return;
    }
    if (msg.index <= this.highestChunkIndex) {
      this.errorBanner = `out-of-order chunk ${msg.index} (have ${this.highestChunkIndex})`;
      this.log(this.errorBanner);
      return;
    }
    let decoded: DecodedChunk;
    try {
      decoded = decodeChunkMessage(msg, this.info.chunk_frames, this.info.height,
                                   this.info.width);
    } catch (err) {
      this.errorBanner = `decode: ${err instanceof Error ? err.message : String(err)}`;
      this.log(this.errorBanner);
      return; // session stays alive
    }
    this.highestChunkIndex = msg.index;
    this.currentCondition = msg.condition_id;
    this.ring[msg.index % this.ringCapacity] = decoded;
    this.latencySeries.push(msg.wall_ms);
    const t = this.now();
    for (let i = 0; i < decoded.frames.length; i++) this.frameArrivals.push(t);
    this.framesReceived += decoded.frames.length;
    this.trimArrivals(t);
  }

  private onAck(msg: Ack): void {
    if (msg.command === "set_condition") {
      // Only the most recent request stays pending (last write wins).
      if (this.pendingCondition === msg.condition_id) {
        this.pendingCondition = null;
      }
      this.markers.push({ effectiveChunk: msg.effective_chunk, conditionId: msg.condition_id });
    }
  }

  private onError(msg: ErrorMessage): void {
    this.errorBanner = `${msg.code}: ${msg.detail}`;
    this.log(this.errorBanner);
    if (msg.code === "busy" || msg.code === "generation_failed") {
      this.state = "failed";
    }
  }

  private onEnd(msg: End): void {
    this.state = "ended";
    this.endTotals = { chunks: msg.total_chunks, frames: msg.total_frames };
  }

  /** Total frames received; the playhead must never exceed this. */
  totalFrames(): number {
    return this.framesReceived;
  }

  /** Grayscale plane for a global frame index, if still in the ring. */
  frameAt(globalFrame: number): Uint8Array | null {
    if (!this.info) return null;
    const k = this.info.chunk_frames;
    const chunkIndex = Math.floor(globalFrame / k);
    if (chunkIndex > this.highestChunkIndex) return null; // never render ahead
    const chunk = this.ring[chunkIndex % this.ringCapacity];
    if (!chunk || chunk.index !== chunkIndex) return null; // evicted from ring
    return chunk.frames[globalFrame % k] ?? null;
  }

  /** Received-frame rate over a sliding 5-second window. */
  fps(): number {
    const t = this.now();
    this.trimArrivals(t);
    return this.frameArrivals.length / (FPS_WINDOW_MS / 1000);
  }

  medianLatencyMs(): number {
    if (this.latencySeries.length === 0) return 0;
    const sorted = [...this.latencySeries].sort((a, b) => a - b);
    return sorted[Math.floor(sorted.length / 2)] ?? 0;
  }

  private trimArrivals(t: number): void {
    const cutoff = t - FPS_WINDOW_MS;
    let drop = 0;
    while (drop < this.frameArrivals.length && this.frameArrivals[drop]! < cutoff) drop++;
    if (drop > 0) this.frameArrivals.splice(0, drop);
  }
}
