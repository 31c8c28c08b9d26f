"""FastAPI policy server: binary WebSocket sessions plus a small REST surface.

Each WebSocket binary message carries exactly one protocol frame. A session
starts with a Hello exchange (the reply's text is the policy description as
JSON), after which every Observation schedules an inference. Only the newest
observation matters: an older request still waiting on injected latency or
on the model is dropped and never answered.
"""
from __future__ import annotations

import asyncio
import json
import logging
import threading
import time
from typing import Optional

import numpy as np
import uvicorn
from fastapi import FastAPI, HTTPException, WebSocket

from .. import chunking
from ..policy import ChunkPolicy, DimMismatch
from ..protocol import (ChunkReply, Error, ErrorCode, Hello, Observation, ProtocolError, WireMessage, decode,
                        encode)
from .config import ServerConfig
from .schemas import (HealthResponse, InferRequest, InferResponse, PolicyInfo, QueueAnalyticsRequest,
                      QueueAnalyticsResponse)

logger = logging.getLogger(__name__)

MAX_FRAME_BODY = 1 << 20
WS_POLICY_VIOLATION = 1008
WS_UNSUPPORTED_DATA = 1003
WS_TRY_AGAIN = 1013
REFUSAL_READ_TIMEOUT = 2.0


class _Closed(Exception):
    pass


class ServerState:
    def __init__(self, config: ServerConfig, policy):
        self.config = config
        self.policy = policy
        self.sessions = 0
        self.total_sessions = 0
        self.lock = asyncio.Lock()

    def info(self) -> dict:
        d = dict(self.policy.describe())
        if self.config.steps is not None:
            d["steps"] = self.config.steps
        d["latency"] = str(self.config.latency)
        return d

    def infer(self, obs, seq: int) -> np.ndarray:
        rng = np.random.default_rng([self.config.seed, seq])
        return self.policy.infer_chunk(obs, rng=rng, steps=self.config.steps)


class Session:
    """One WebSocket connection: receive loop plus a single inference worker."""

    def __init__(self, state: ServerState, ws: WebSocket, session_id: int):
        self.state = state
        self.ws = ws
        self.latest: Optional[tuple] = None
        self.wake = asyncio.Event()
        self.send_lock = asyncio.Lock()
        self.rng = np.random.default_rng([state.config.seed, session_id, 1])
        self.replies = 0

    async def send(self, msg: WireMessage):
        async with self.send_lock:
            await self.ws.send_bytes(encode(msg))

    async def recv(self) -> Optional[WireMessage]:
        message = await self.ws.receive()
        if message["type"] == "websocket.disconnect":
            return None
        data = message.get("bytes")
        try:
            if data is None:
                raise ProtocolError("text messages are not part of the protocol")
            msg, rest = decode(data, MAX_FRAME_BODY)
            if rest:
                raise ProtocolError(f"{len(rest)} bytes after the frame")
        except ProtocolError as e:
            await self.send(WireMessage(0, Error(ErrorCode.MALFORMED, f"{type(e).__name__}: {e}")))
            await self.ws.close(WS_UNSUPPORTED_DATA)
            raise _Closed from None
        return msg

    async def worker(self):
        cfg = self.state.config
        loop = asyncio.get_running_loop()
        while True:
            await self.wake.wait()
            self.wake.clear()
            seq, obs = self.latest
            delay = cfg.latency.sample(self.rng)
            if delay > 0:
                try:
                    await asyncio.wait_for(self.wake.wait(), delay)
                    continue  # superseded while waiting
                except asyncio.TimeoutError:
                    pass
            try:
                chunk = await loop.run_in_executor(None, self.state.infer, obs, seq)
            except DimMismatch as e:
                if self.latest[0] == seq:
                    await self.send(WireMessage(seq, Error(ErrorCode.DIM_MISMATCH, str(e))))
                continue
            except Exception as e:  # keep the session alive, report in band
                logger.exception("inference failed")
                await self.send(WireMessage(seq, Error(ErrorCode.INTERNAL, str(e))))
                continue
            if self.latest[0] != seq:
                continue
            await self.send(WireMessage(seq, ChunkReply(chunk)))
            self.replies += 1

    async def run(self):
        msg = await self.recv()
        if msg is None:
            return
        if not isinstance(msg.payload, Hello):
            await self.send(WireMessage(msg.seq, Error(ErrorCode.BAD_STATE, "session must open with Hello")))
            await self.ws.close(WS_POLICY_VIOLATION)
            return
        await self.send(WireMessage(msg.seq, Hello(json.dumps(self.state.info(), sort_keys=True))))
        worker = asyncio.create_task(self.worker())
        try:
            while True:
                msg = await self.recv()
                if msg is None:
                    return
                p = msg.payload
                if isinstance(p, Observation):
                    if self.latest is not None and msg.seq <= self.latest[0]:
                        await self.send(WireMessage(msg.seq, Error(
                            ErrorCode.BAD_STATE, f"seq {msg.seq} not above previous {self.latest[0]}")))
                        continue
                    self.latest = (msg.seq, p.values)
                    self.wake.set()
                elif isinstance(p, Hello):
                    await self.send(WireMessage(msg.seq, Error(ErrorCode.BAD_STATE, "duplicate Hello")))
                else:
                    await self.send(WireMessage(msg.seq, Error(
                        ErrorCode.UNSUPPORTED, f"{msg.kind.name} is not served here")))
        finally:
            worker.cancel()


def create_app(config: ServerConfig, policy=None) -> FastAPI:
    """Build the app. ``policy`` overrides loading ``config.ckpt``."""
    if policy is None:
        if not config.ckpt:
            raise ValueError("no checkpoint configured")
        policy = ChunkPolicy.load(config.ckpt)
    state = ServerState(config, policy)
    app = FastAPI(title="asyncchunk policy server")
    app.state.server = state

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(sessions=state.sessions, max_sessions=config.max_sessions)

    @app.get("/info", response_model=PolicyInfo)
    def info():
        return PolicyInfo(**state.info())

    @app.post("/infer", response_model=InferResponse)
    def infer(req: InferRequest):
        t0 = time.perf_counter()
        try:
            rng = np.random.default_rng(req.seed)
            chunk = policy.infer_chunk(np.array(req.obs_stack), rng=rng, steps=req.steps or config.steps)
        except DimMismatch as e:
            raise HTTPException(status_code=422, detail=str(e)) from None
        return InferResponse(actions=chunk.tolist(), h_a=chunk.shape[0],
                             elapsed_ms=1000 * (time.perf_counter() - t0))

    @app.post("/analytics/queue", response_model=QueueAnalyticsResponse)
    def queue_analytics(req: QueueAnalyticsRequest):
        try:
            g_min, idle = chunking.queue_analytics(req.e_ls, req.dt, req.h_a)
        except chunking.DegenerateHorizon as e:
            raise HTTPException(status_code=422, detail=str(e)) from None
        return QueueAnalyticsResponse(g_min=g_min, idle_seq=idle,
                                      sawtooth_width=chunking.sawtooth_width(req.e_ls, req.dt))

    @app.websocket("/ws")
    async def ws_endpoint(websocket: WebSocket):
        await websocket.accept()
        async with state.lock:
            full = state.sessions >= config.max_sessions
            if not full:
                state.sessions += 1
                state.total_sessions += 1
                sid = state.total_sessions
        if full:
            # consume the client's opening frame first: closing with it unread can reset the
            # connection and destroy the refusal before the client reads it
            try:
                await asyncio.wait_for(websocket.receive(), REFUSAL_READ_TIMEOUT)
            except asyncio.TimeoutError:
                pass
            await websocket.send_bytes(encode(WireMessage(0, Error(
                ErrorCode.TOO_MANY_SESSIONS, f"server already has {config.max_sessions} sessions"))))
            await websocket.close(WS_TRY_AGAIN)
            return
        try:
            await Session(state, websocket, sid).run()
        except _Closed:
            pass
        finally:
            async with state.lock:
                state.sessions -= 1

    return app


def serve(config: ServerConfig, policy=None):
    """Run the server in the foreground until interrupted."""
    uvicorn.run(create_app(config, policy), host=config.host, port=config.port, log_level="info")


class ServerThread:
    """Run an app under uvicorn in a background thread; port 0 picks a free port."""

    def __init__(self, app: FastAPI, host: str = "127.0.0.1", port: int = 0):
        self.server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, log_level="warning"))
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.host = host
        self.port = port

    def start(self, timeout: float = 10.0) -> "ServerThread":
        self.thread.start()
        deadline = time.monotonic() + timeout
        while not self.server.started:
            if not self.thread.is_alive() or time.monotonic() > deadline:
                raise RuntimeError("server failed to start")
            time.sleep(0.01)
        self.port = self.server.servers[0].sockets[0].getsockname()[1]
        return self

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def stop(self):
        self.server.should_exit = True
        self.thread.join(timeout=10)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
