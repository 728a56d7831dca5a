// DOM shell: wires the session state machine to a canvas, control panel and
// live stats. Server pushes; we never poll. Frame pacing follows the
// session_info fps estimate behind a 2-chunk jitter buffer.

import { grayToRgba, quantizeFrame, bytesToBase64 } from "./decode.js";
import { SessionView } from "./session.js";

const JITTER_CHUNKS = 2;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

class Studio {
  private session = new SessionView();
  private ws: WebSocket | null = null;
  private playhead = 0; // global frame index of the next frame to draw
  private lastDraw = 0;
  private canvas = el<HTMLCanvasElement>("view");
  private ctx = this.canvas.getContext("2d")!;
  private scratch: HTMLCanvasElement = document.createElement("canvas");

  constructor() {
    el<HTMLButtonElement>("start").onclick = () => this.start();
    el<HTMLButtonElement>("stop").onclick = () => this.session.stop();
    el<HTMLButtonElement>("switch").onclick = () => this.switchCondition();
    el<HTMLButtonElement>("snapshot").onclick = () => this.snapshot();
    el<HTMLInputElement>("image").onchange = (e) => this.uploadImage(e);
    requestAnimationFrame((t) => this.tick(t));
  }

  private start(): void {
    const url = el<HTMLInputElement>("server").value;
    this.ws?.close();
    this.session = new SessionView({ log: (line) => this.banner(line) });
    this.playhead = 0;
    const ws = new WebSocket(url);
    this.ws = ws;
    ws.onmessage = (ev) => {
      this.session.handleMessage(String(ev.data));
      this.refreshPanel();
    };
    ws.onerror = () => this.banner("websocket error");
    ws.onopen = () => {
      this.session.attach({ send: (text) => ws.send(text), close: () => ws.close() });
      const chunks = parseInt(el<HTMLInputElement>("chunks").value, 10);
      this.session.start({
        conditionId: parseInt(el<HTMLSelectElement>("condition").value, 10),
        numChunks: Number.isFinite(chunks) && chunks > 0 ? chunks : null,
        seed: parseInt(el<HTMLInputElement>("seed").value, 10) || 0,
        steps: parseInt(el<HTMLInputElement>("steps").value, 10) || 4,
      });
    };
  }

  private switchCondition(): void {
    this.session.switchCondition(parseInt(el<HTMLSelectElement>("condition").value, 10));
  }

  private uploadImage(event: Event): void {
    const input = event.target as HTMLInputElement;
    const file = input.files?.[0];
    const info = this.session.info;
    if (!file || !info) return;
    createImageBitmap(file).then((bitmap) => {
      this.scratch.width = info.width;
      this.scratch.height = info.height;
      const sctx = this.scratch.getContext("2d")!;
      sctx.drawImage(bitmap, 0, 0, info.width, info.height);
      const rgba = sctx.getImageData(0, 0, info.width, info.height).data;
      const gray = new Float32Array(info.width * info.height);
      for (let i = 0; i < gray.length; i++) {
        const lum = (rgba[i * 4]! + rgba[i * 4 + 1]! + rgba[i * 4 + 2]!) / 3;
        gray[i] = lum / 127.5 - 1;
      }
      this.session.injectImage(bytesToBase64(quantizeFrame(gray)));
    });
  }

  private snapshot(): void {
    const link = document.createElement("a");
    link.download = `frame_${this.playhead}.png`;
    link.href = this.canvas.toDataURL("image/png");
    link.click();
  }

  private banner(line: string): void {
    el<HTMLDivElement>("banner").textContent = line;
  }

  private tick(t: number): void {
    const info = this.session.info;
    if (info) {
      const fps = info.fps_estimate > 0 ? info.fps_estimate : Math.max(this.session.fps(), 4);
      const framePeriod = 1000 / fps;
      const buffered = this.session.totalFrames() - this.playhead;
      const jitterTarget = JITTER_CHUNKS * info.chunk_frames;
      const behind = this.session.totalFrames() - jitterTarget;
      if (buffered > 0 && t - this.lastDraw >= framePeriod &&
          (this.playhead < behind || this.session.state === "ended")) {
        const plane = this.session.frameAt(this.playhead);
        if (plane) {
          this.draw(plane, info.width, info.height);
          this.playhead++;
          this.lastDraw = t;
        } else if (this.playhead < behind - jitterTarget) {
          this.playhead++; // evicted from the ring; skip forward
        }
      }
    }
    this.refreshPanel();
    requestAnimationFrame((next) => this.tick(next));
  }

  private draw(plane: Uint8Array, width: number, height: number): void {
    const image = new ImageData(grayToRgba(plane), width, height);
    this.scratch.width = width;
    this.scratch.height = height;
    this.scratch.getContext("2d")!.putImageData(image, 0, 0);
    this.ctx.imageSmoothingEnabled = false;
    this.ctx.drawImage(this.scratch, 0, 0, this.canvas.width, this.canvas.height);
  }

  private refreshPanel(): void {
    el<HTMLSpanElement>("state").textContent = this.session.state;
    el<HTMLSpanElement>("fps").textContent = this.session.fps().toFixed(1);
    el<HTMLSpanElement>("latency").textContent = this.session.medianLatencyMs().toFixed(0);
    el<HTMLSpanElement>("frames").textContent =
      `${this.playhead}/${this.session.totalFrames()}`;
    const pending = this.session.pendingCondition;
    el<HTMLSpanElement>("pending").textContent = pending === null ? "-" : String(pending);
    el<HTMLSpanElement>("markers").textContent = this.session.markers
      .map((m) => `c${m.conditionId}@${m.effectiveChunk}`).join(" ");
    const info = this.session.info;
    const picker = el<HTMLSelectElement>("condition");
    if (info && picker.options.length !== info.n_conditions) {
      picker.innerHTML = "";
      for (let c = 0; c < info.n_conditions; c++) {
        const option = document.createElement("option");
        option.value = String(c);
        option.textContent = `condition ${c}`;
        picker.appendChild(option);
      }
    }
  }
}

new Studio();
