import asyncio
import socket

import pytest
import torch
import websockets

from causvid import protocol
from causvid.server import ServerConfig, serve
from conftest import tiny_model


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def student():
    return tiny_model(seed=4, predicts="x0")


def run_with_server(student, coro_factory, **config_kw):
    """Start the server, run the client coroutine against it, tear down."""
    kw = dict(host="127.0.0.1", port=free_port(), chunk_frames=2)
    kw.update(config_kw)
    config = ServerConfig(**kw)

    async def main():
        ready = asyncio.Event()
        server_task = asyncio.create_task(serve(config, model=student, ready=ready))
        await asyncio.wait_for(ready.wait(), timeout=20)
        try:
            return await asyncio.wait_for(coro_factory(config), timeout=60)
        finally:
            server_task.cancel()
            try:
                await server_task
            except asyncio.CancelledError:
                pass

    return asyncio.run(main())


async def collect(ws, until_types, limit=200):
    """Read messages until one of `until_types` arrives; returns all messages."""
    msgs = []
    for _ in range(limit):
        msg = protocol.decode(await ws.recv())
        msgs.append(msg)
        if isinstance(msg, until_types):
            return msgs
    raise AssertionError(f"no {until_types} within {limit} messages")


def uri(config):
    return f"ws://{config.host}:{config.port}"


class TestLifecycle:
    def test_start_then_stop_clean(self, student):
        async def client(config):
            async with websockets.connect(uri(config)) as ws:
                await ws.send(protocol.encode(protocol.Start(seq=0, condition_id=1,
                                                             num_chunks=2, seed=0)))
                msgs = await collect(ws, protocol.End)
                return msgs

        msgs = run_with_server(student, client)
        assert isinstance(msgs[0], protocol.SessionInfo)
        chunks = [m for m in msgs if isinstance(m, protocol.Chunk)]
        assert len(chunks) == 2
        assert [c.index for c in chunks] == [0, 1]
        seqs = [m.seq for m in msgs]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
        assert msgs[-1].total_chunks == 2

    def test_immediate_stop(self, student):
        async def client(config):
            async with websockets.connect(uri(config)) as ws:
                await ws.send(protocol.encode(protocol.Start(seq=0, condition_id=0, seed=1)))
                await ws.send(protocol.encode(protocol.Stop(seq=1)))
                return await collect(ws, protocol.End)

        msgs = run_with_server(student, client)
        assert isinstance(msgs[-1], protocol.End)
        assert not any(isinstance(m, protocol.Error) for m in msgs)

    def test_budget_exhaustion_sends_end(self, student):
        async def client(config):
            async with websockets.connect(uri(config)) as ws:
                await ws.send(protocol.encode(protocol.Start(seq=0, condition_id=0, seed=0)))
                return await collect(ws, protocol.End)

        msgs = run_with_server(student, client, frame_budget=6)
        chunks = [m for m in msgs if isinstance(m, protocol.Chunk)]
        assert len(chunks) == 3  # 6 frames / 2 per chunk
        assert isinstance(msgs[-1], protocol.End)


class TestControl:
    def test_set_condition_acknowledged(self, student):
        async def client(config):
            async with websockets.connect(uri(config)) as ws:
                await ws.send(protocol.encode(protocol.Start(seq=0, condition_id=0,
                                                             num_chunks=6, seed=0)))
                msgs = await collect(ws, protocol.Chunk)
                await ws.send(protocol.encode(protocol.SetCondition(seq=1, condition_id=2)))
                rest = await collect(ws, protocol.End)
                return msgs + rest

        msgs = run_with_server(student, client)
        acks = [m for m in msgs if isinstance(m, protocol.Ack)]
        assert len(acks) == 1 and acks[0].command == "set_condition"
        first_chunk = next(m for m in msgs if isinstance(m, protocol.Chunk))
        assert acks[0].effective_chunk <= first_chunk.index + 2
        chunks = [m for m in msgs if isinstance(m, protocol.Chunk)]
        assert chunks[-1].condition_id == 2  # switch took effect
        for c in chunks:
            if c.index >= acks[0].effective_chunk:
                assert c.condition_id == 2

    def test_bad_condition_error_session_continues(self, student):
        async def client(config):
            async with websockets.connect(uri(config)) as ws:
                await ws.send(protocol.encode(protocol.Start(seq=0, condition_id=0,
                                                             num_chunks=3, seed=0)))
                await ws.send(protocol.encode(protocol.SetCondition(seq=1, condition_id=42)))
                return await collect(ws, protocol.End)

        msgs = run_with_server(student, client)
        errors = [m for m in msgs if isinstance(m, protocol.Error)]
        assert len(errors) == 1 and errors[0].code == "bad_condition"
        assert isinstance(msgs[-1], protocol.End)  # not killed by the bad switch

    def test_malformed_message_errors_and_closes(self, student):
        async def client(config):
            async with websockets.connect(uri(config)) as ws:
                await ws.send("this is not a protocol message")
                msg = protocol.decode(await ws.recv())
                return msg

        msg = run_with_server(student, client)
        assert isinstance(msg, protocol.Error)

    def test_inject_image(self, student):
        async def client(config):
            async with websockets.connect(uri(config)) as ws:
                import numpy as np
                image = np.full((1, 8, 8, 1), 0.5, dtype=np.float32)
                await ws.send(protocol.encode(protocol.Start(seq=0, condition_id=1,
                                                             num_chunks=2, seed=0)))
                await ws.send(protocol.encode(protocol.InjectImage(
                    seq=1, frame=protocol.encode_frames(image))))
                return await collect(ws, protocol.End)

        msgs = run_with_server(student, client)
        acks = [m for m in msgs if isinstance(m, protocol.Ack)]
        assert any(a.command == "inject_image" for a in acks)


class TestConcurrency:
    def test_two_sessions_independent_and_deterministic(self, student):
        async def one_session(config, seed):
            async with websockets.connect(uri(config)) as ws:
                await ws.send(protocol.encode(protocol.Start(seq=0, condition_id=1,
                                                             num_chunks=3, seed=seed)))
                msgs = await collect(ws, protocol.End)
                return [m.frames for m in msgs if isinstance(m, protocol.Chunk)]

        async def client(config):
            a, b = await asyncio.gather(one_session(config, 7), one_session(config, 8))
            a_again = await one_session(config, 7)
            return a, b, a_again

        a, b, a_again = run_with_server(student, client)
        assert a == a_again  # deterministic per seed
        assert a != b        # different seeds differ

    def test_session_limit(self, student):
        async def client(config):
            async with websockets.connect(uri(config)) as first:
                await first.send(protocol.encode(protocol.Start(seq=0, condition_id=0,
                                                                num_chunks=None, seed=0)))
                await first.recv()  # session_info: the slot is now held
                async with websockets.connect(uri(config)) as second:
                    msg = protocol.decode(await second.recv())
                    return msg

        msg = run_with_server(student, client, max_sessions=1)
        assert isinstance(msg, protocol.Error) and msg.code == "busy"
