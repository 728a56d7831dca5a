"""Streaming generation server: one websocket connection drives one generation
session. Chunks are pushed as produced; control messages (condition switches,
image injection, stop) are applied between chunks in arrival order."""

from __future__ import annotations

import asyncio
from dataclasses import dataclass

import numpy as np
import torch
import websockets

from . import protocol
from .model import CausalDiT, load_weights
from .schedule import INFERENCE_TIMESTEPS
from .streaming import GenerationSession


@dataclass(frozen=True)
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8787
    weights_path: str = ""
    chunk_frames: int = 4
    max_sessions: int = 4
    frame_budget: int = 4000  # per-session emitted-frame cap
    heartbeat_s: float = 20.0
    window_chunks: int = 0  # 0 disables sliding-window rebase

    def __post_init__(self):
        if self.frame_budget <= 0 or self.max_sessions < 1:
            raise ValueError("frame_budget must be > 0 and max_sessions >= 1")


class _Connection:
    def __init__(self, ws, model: CausalDiT, config: ServerConfig, fps_estimate: float = 0.0):
        self.ws = ws
        self.model = model
        self.config = config
        self.fps_estimate = fps_estimate
        self.session: GenerationSession | None = None
        self.out_seq = protocol.SequenceStamper()
        self.in_check = protocol.SequenceChecker()
        self.remaining: int | None = None
        self.frames_sent = 0
        self.stopping = False

    async def send(self, cls, **kw):
        await self.ws.send(protocol.encode(cls(seq=self.out_seq.take(), **kw)))

    async def send_error(self, code: str, detail: str):
        await self.send(protocol.Error, code=code, detail=detail)

    async def handle(self):
        try:
            async for text in self.ws:
                try:
                    msg = protocol.decode(text)
                    self.in_check.check(msg)
                except protocol.ProtocolError as e:
                    await self.send_error(e.code, e.detail)
                    break  # malformed message: error then session close
                if not await self.dispatch(msg):
                    break
        finally:
            self.stopping = True

    async def dispatch(self, msg) -> bool:
        if isinstance(msg, protocol.Start):
            return await self.on_start(msg)
        if isinstance(msg, protocol.SetCondition):
            return await self.on_set_condition(msg)
        if isinstance(msg, protocol.InjectImage):
            return await self.on_inject_image(msg)
        if isinstance(msg, protocol.Stop):
            await self.finish()
            return False
        await self.send_error("bad_state", f"unexpected {type(msg).__name__}")
        return False

    async def on_start(self, msg: protocol.Start) -> bool:
        if self.session is not None:
            await self.send_error("bad_state", "session already started")
            return False
        cfg = self.model.config
        if not 0 <= msg.condition_id < cfg.cond_vocab - 1:
            await self.send_error("bad_condition", f"unknown condition {msg.condition_id}")
            return False
        if msg.steps > len(INFERENCE_TIMESTEPS):
            await self.send_error("bad_field", f"steps must be <= {len(INFERENCE_TIMESTEPS)}")
            return False
        timesteps = INFERENCE_TIMESTEPS[: msg.steps]
        self.session = GenerationSession(self.model, self.config.chunk_frames,
                                         msg.condition_id, seed=msg.seed, timesteps=timesteps)
        self.remaining = msg.num_chunks
        await self.send(protocol.SessionInfo, height=cfg.frame_h, width=cfg.frame_w,
                        channels=cfg.channels, chunk_frames=self.config.chunk_frames,
                        fps_estimate=self.fps_estimate, n_conditions=cfg.cond_vocab - 1)
        asyncio.get_running_loop().create_task(self.generate())
        return True

    async def on_set_condition(self, msg: protocol.SetCondition) -> bool:
        if self.session is None:
            await self.send_error("bad_state", "no active session")
            return False
        try:
            effective = self.session.set_condition(msg.condition_id)
        except ValueError:
            await self.send_error("bad_condition", f"unknown condition {msg.condition_id}")
            return True  # session continues
        await self.send(protocol.Ack, command="set_condition", effective_chunk=effective,
                        condition_id=msg.condition_id)
        return True

    async def on_inject_image(self, msg: protocol.InjectImage) -> bool:
        if self.session is None:
            await self.send_error("bad_state", "no active session")
            return False
        cfg = self.model.config
        try:
            frames = protocol.decode_frames(msg.frame, 1, cfg.frame_h, cfg.frame_w)
        except protocol.ProtocolError as e:
            await self.send_error(e.code, e.detail)
            return True
        image = torch.from_numpy(frames[0])
        index = self.session.chunk_index
        self.session.inject_image(image)
        chunk = image[None].expand(self.config.chunk_frames, -1, -1, -1).numpy()
        await self.send(protocol.Ack, command="inject_image", effective_chunk=index,
                        condition_id=self.session.records[-1].condition_id)
        await self.emit_chunk(index, chunk, self.session.records[-1].wall_ms)
        return True

    async def emit_chunk(self, index: int, frames: np.ndarray, wall_ms: float):
        record = self.session.records[index]
        await self.send(protocol.Chunk, index=index, condition_id=record.condition_id,
                        wall_ms=wall_ms, frames=protocol.encode_frames(frames))
        self.frames_sent += frames.shape[0]

    async def generate(self):
        try:
            while not self.stopping:
                if self.remaining is not None and self.remaining <= 0:
                    await self.finish()
                    break
                if self.frames_sent + self.config.chunk_frames > self.config.frame_budget:
                    await self.finish()
                    break
                session = self.session
                if (self.config.window_chunks
                        and session.cache.committed_chunks >= self.config.window_chunks):
                    session.extend_sliding_window(context_chunks=1)
                index = session.chunk_index
                chunk = await asyncio.to_thread(session.generate_chunk)
                await self.emit_chunk(index, chunk[0].numpy(), session.records[index].wall_ms)
                if self.remaining is not None:
                    self.remaining -= 1
        except websockets.ConnectionClosed:
            pass
        except Exception as e:  # diagnostic error, then drop the session
            try:
                await self.send_error("generation_failed", str(e))
                await self.ws.close()
            except websockets.ConnectionClosed:
                pass

    async def finish(self):
        self.stopping = True
        chunks = self.session.chunk_index if self.session else 0
        try:
            await self.send(protocol.End, total_chunks=chunks, total_frames=self.frames_sent)
            await self.ws.close()
        except websockets.ConnectionClosed:
            pass


def _warmup_fps(model: CausalDiT, config: ServerConfig) -> float:
    """One throwaway chunk at boot: warms the weights and calibrates the
    fps estimate sent in session_info."""
    session = GenerationSession(model, config.chunk_frames, 0, seed=0)
    session.generate_chunk()
    wall_s = session.records[0].wall_ms / 1e3
    return config.chunk_frames / wall_s if wall_s > 0 else 0.0


async def serve(config: ServerConfig, model: CausalDiT | None = None,
                ready: asyncio.Event | None = None):
    """Run the server until cancelled. Weights load once; sessions share them
    read-only."""
    if model is None:
        model = load_weights(config.weights_path)
    model.eval()
    fps_estimate = _warmup_fps(model, config)
    active = set()

    async def handler(ws):
        if len(active) >= config.max_sessions:
            stamper = protocol.SequenceStamper()
            await ws.send(protocol.encode(protocol.Error(
                seq=stamper.take(), code="busy", detail="max concurrent sessions reached")))
            await ws.close()
            return
        conn = _Connection(ws, model, config, fps_estimate)
        active.add(conn)
        try:
            await conn.handle()
        finally:
            active.discard(conn)

    async with websockets.serve(handler, config.host, config.port,
                                ping_interval=config.heartbeat_s):
        if ready is not None:
            ready.set()
        await asyncio.Future()


def run_server(config: ServerConfig, model: CausalDiT | None = None):
    asyncio.run(serve(config, model))
