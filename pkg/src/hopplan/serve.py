"""Live steering service: the rolling controller in a loop behind a websocket.

Protocol (text frames of JSON):
  server -> client, >= 20 Hz:
    {"type": "state", "tick": int,
     "agents": [{"p": [x, y, z], "v": [vx, vy, vz]}],
     "scene": {...}, "plan": [[x, y, z], ...]}
    plus informational fields: "target_v", "target_z", "writer".
  client -> server:
    {"type": "steer", "target_v": [vx, vy], "target_z": z | null}
    {"type": "reset"}
  Unknown types or malformed frames get {"type": "error", "msg": ...} and the
  session continues. The first client steers; later clients are read-only
  spectators.

Steering rewrites the task-space guidance term between control steps; a
target received during step t is in force for step t+1 at the latest.
"""

from __future__ import annotations

import asyncio
import contextlib
import json
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import config as cfgmod
from . import world
from .controller import RollingController
from .denoiser import Denoiser
from .diffusion import make_schedule
from .guidance import GuidanceSpec, GuidanceTerm
from .world import Cylinder, Scene, SimState

STEER_WEIGHT = 0.1  # gamepad task-space weight
MAX_TARGET_SPEED = 3.0


def build_scene(name: str) -> Scene:
    if name == "empty":
        return Scene(bounds=60.0)
    if name == "forest":
        pillars = [Cylinder((x, y), 0.35) for x, y in
                   [(3, 1), (5, -1.5), (7, 0.5), (9, -0.5), (4, 2.5), (8, 2.5)]]
        return Scene(cylinders=pillars, bounds=60.0)
    raise ValueError(f"unknown serve scene '{name}'")


@dataclass
class SteerState:
    target_v: tuple[float, float] = (0.0, 0.0)
    target_z: float | None = None
    pending: dict | None = None
    reset_requested: bool = False
    tick: int = 0
    clients: list = field(default_factory=list)  # [(id, queue)]
    writer: int | None = None
    next_id: int = 0


class SteerService:
    def __init__(self, checkpoint: str, cfg: dict):
        self.model, self.norm, _, _ = Denoiser.load(checkpoint)
        if self.norm is None:
            raise ValueError("checkpoint lacks normalization statistics")
        self.cfg = cfg
        serve_cfg = cfg.get("serve", {})
        self.scene = build_scene(serve_cfg.get("scene", "empty"))
        self.period = world.DT
        self.state = SteerState()
        tv = serve_cfg.get("target_v")
        if tv:
            self.state.target_v = (float(tv[0]), float(tv[1]))
        self._build_controller()

    def _build_controller(self) -> None:
        horizon = self.model.cfg.H
        self.spec = GuidanceSpec(terms=[GuidanceTerm(
            "task-space", STEER_WEIGHT,
            {"selector": "velocity",
             "keyframes": {i: list(self.state.target_v) for i in range(horizon)}})])
        schedule = make_schedule(self.model.cfg.K, self.model.cfg.schedule)
        self.ctl = RollingController(
            self.model, schedule, self.norm, cfgmod.controller_config(self.cfg),
            [self.spec], [self.scene], seed=self.cfg.get("seed", 0))
        self.sim = SimState.make()

    def _apply_pending(self) -> None:
        st = self.state
        if st.reset_requested:
            st.reset_requested = False
            self._build_controller()
        if st.pending is not None:
            msg, st.pending = st.pending, None
            tv = msg.get("target_v") or (0.0, 0.0)
            speed = float(np.hypot(tv[0], tv[1]))
            if speed > MAX_TARGET_SPEED:
                tv = [v * MAX_TARGET_SPEED / speed for v in tv]
            st.target_v = (float(tv[0]), float(tv[1]))
            st.target_z = msg.get("target_z")
            horizon = self.model.cfg.H
            terms = [GuidanceTerm("task-space", STEER_WEIGHT,
                                  {"selector": "velocity",
                                   "keyframes": {i: list(st.target_v)
                                                 for i in range(horizon)}})]
            if st.target_z is not None:
                terms.append(GuidanceTerm("task-space", STEER_WEIGHT,
                                          {"selector": "height",
                                           "keyframes": {i: [float(st.target_z)]
                                                         for i in range(horizon)}}))
            self.spec.terms = terms

    def step(self) -> dict:
        """One control step; returns the state frame (called off the event loop)."""
        self._apply_pending()
        obs = np.concatenate([self.sim.p, self.sim.v])[None]
        info = self.ctl.advance(obs)
        self.sim = world.step(self.sim, info.actions[0])
        self.state.tick += 1
        from .tasks import _scene_dict
        return {
            "type": "state",
            "tick": self.state.tick,
            "agents": [{"p": [round(float(v), 4) for v in self.sim.p],
                        "v": [round(float(v), 4) for v in self.sim.v]}],
            "scene": _scene_dict(self.scene),
            "plan": [[round(float(v), 4) for v in row] for row in self.ctl.plans[0]],
            "target_v": list(self.state.target_v),
            "target_z": self.state.target_z,
            "writer": self.state.writer,
        }

    async def loop(self) -> None:
        while True:
            t0 = asyncio.get_event_loop().time()
            frame = await asyncio.to_thread(self.step)
            payload = json.dumps(frame)
            for _cid, queue in list(self.state.clients):
                if queue.full():
                    with contextlib.suppress(asyncio.QueueEmpty):
                        queue.get_nowait()
                queue.put_nowait(payload)
            elapsed = asyncio.get_event_loop().time() - t0
            await asyncio.sleep(max(0.0, self.period - elapsed))


def build_app(checkpoint: str, cfg: dict | None = None) -> FastAPI:
    cfg = cfgmod.validate(cfg or {"version": 1})
    service = SteerService(checkpoint, cfg)

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        task = asyncio.create_task(service.loop())
        yield
        task.cancel()
        with contextlib.suppress(asyncio.CancelledError):
            await task

    app = FastAPI(lifespan=lifespan)
    app.state.service = service

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        st = service.state
        cid = st.next_id
        st.next_id += 1
        queue: asyncio.Queue = asyncio.Queue(maxsize=2)
        st.clients.append((cid, queue))
        if st.writer is None:
            st.writer = cid

        async def sender():
            while True:
                await ws.send_text(await queue.get())

        send_task = asyncio.create_task(sender())
        try:
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                    if not isinstance(msg, dict):
                        raise ValueError("frame must be an object")
                except ValueError as e:
                    await ws.send_text(json.dumps(
                        {"type": "error", "msg": f"malformed frame: {e}"}))
                    continue
                kind = msg.get("type")
                if kind == "steer":
                    if cid != st.writer:
                        await ws.send_text(json.dumps(
                            {"type": "error", "msg": "read-only spectator"}))
                        continue
                    tv = msg.get("target_v")
                    if (not isinstance(tv, (list, tuple)) or len(tv) != 2
                            or not all(isinstance(v, (int, float)) for v in tv)):
                        await ws.send_text(json.dumps(
                            {"type": "error", "msg": "steer needs target_v [vx, vy]"}))
                        continue
                    st.pending = {"target_v": tv, "target_z": msg.get("target_z")}
                elif kind == "reset":
                    if cid != st.writer:
                        await ws.send_text(json.dumps(
                            {"type": "error", "msg": "read-only spectator"}))
                        continue
                    st.reset_requested = True
                else:
                    await ws.send_text(json.dumps(
                        {"type": "error", "msg": f"unknown type {kind!r}"}))
        except WebSocketDisconnect:
            pass
        finally:
            send_task.cancel()
            st.clients = [(i, q) for i, q in st.clients if i != cid]
            if st.writer == cid:
                st.writer = st.clients[0][0] if st.clients else None

    return app


def serve(checkpoint: str, cfg: dict | None = None, host: str = "127.0.0.1",
          port: int = 8700) -> None:
    import uvicorn

    uvicorn.run(build_app(checkpoint, cfg), host=host, port=port, log_level="info")
