"""Deterministic session engine: phases, commands, trials, replay.

The engine is pure tick-domain logic: commands are applied at tick
boundaries in arrival order, every observation stream is indexed by the
tick counter, and time is tick/rate.  Replaying (seed, command log)
therefore reproduces every state payload bit for bit; the live TCP
service is a thin wall-clock shell around this class.

Phase machine (documented field-by-field in PROTOCOL.md):

    idle          --start_calibration-->  calibrating
    calibrating   --auto, n_pairs ticks-->  guiding        (calibrated)
    guiding       --start_registration-->  registering
    registering   --auto, n_views+1 ticks--> guiding       (registered)
    guiding       --set_target, start_trial--> trial_running
    trial_running --insert-->  trial_complete
    trial_running/trial_complete --end_trial--> guiding    (record written)

jog is accepted in idle, guiding, and trial_running; every other
combination is rejected with ``illegal_phase`` and leaves the state
unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    BadParamsError,
    IllegalPhaseError,
    SpineNavError,
    UnknownTargetError,
)
from .guidance import predict_hit, stl_bytes
from .kinematics import JOG_AXES, jog
from .phantom import (
    Scenario,
    depth_viewpoints,
    observe_depth,
    observe_tracker,
    placement_error,
    scenario_registration_params,
    simulate_insertion,
)
from .registration import RegistrationParams, register_robot
from .transforms import Frame, RigidTransform, TransformGraph

__all__ = ["Phase", "TrialRecord", "Session", "replay_log", "load_command_log", "save_command_log", "ScriptedOperator"]

PROTOCOL_VERSION = 1
HIT_SPHERE_RADIUS_MM = 2.0


class Phase(str, Enum):
    IDLE = "idle"
    CALIBRATING = "calibrating"
    REGISTERING = "registering"
    GUIDING = "guiding"
    TRIAL_RUNNING = "trial_running"
    TRIAL_COMPLETE = "trial_complete"


@dataclass(frozen=True)
class TrialRecord:
    target_id: str
    target_kind: str
    elapsed_ms: float
    placement_error_mm: float | None
    command_count: int
    seed: int

    def to_json_line(self) -> str:
        doc = {
            "target_id": self.target_id,
            "target_kind": self.target_kind,
            "elapsed_ms": self.elapsed_ms,
            "placement_error_mm": self.placement_error_mm,
            "command_count": self.command_count,
            "seed": self.seed,
        }
        return json.dumps(doc)

    @classmethod
    def from_json_line(cls, line: str) -> "TrialRecord":
        doc = json.loads(line)
        return cls(
            doc["target_id"],
            doc["target_kind"],
            doc["elapsed_ms"],
            doc["placement_error_mm"],
            doc["command_count"],
            doc["seed"],
        )


class Session:
    """Owns all mutable simulation state; single-threaded by contract."""

    def __init__(
        self,
        scenario: Scenario,
        tick_rate: float = 30.0,
        registration_params: RegistrationParams | None = None,
        registration_views: int = 6,
    ):
        self.scenario = scenario
        self.tick_rate = float(tick_rate)
        self.registration_params = registration_params or scenario_registration_params(seed=scenario.seed)
        self.registration_views = registration_views

        self.tick = 0
        self.phase = Phase.IDLE
        self.calibrated = False
        self.registered = False
        self.robot = scenario.model.state(scenario.truth.start_joints, 0)
        self.graph = TransformGraph()
        self.records: list[TrialRecord] = []
        self.active_target: str | None = None
        self.last_error_mm: float | None = None

        self._trial_start_tick: int | None = None
        self._trial_commands = 0
        self._phase_ticks_left = 0
        self._pending_pairs = 0
        self._saved_phase = Phase.IDLE
        self._saved_robot = self.robot
        self._depth_frames: list = []
        self._calibration_solution = None
        self._registration_result = None
        self._spine_stl_b64: str | None = None

        self._refresh_live_edges()

    # -- command handling ---------------------------------------------------

    def apply(self, command: dict) -> dict:
        """Validate and apply one command; returns the ack payload."""
        try:
            name = command.get("name")
            if name == "jog":
                self._cmd_jog(command)
            elif name == "start_calibration":
                self._cmd_start_calibration(command)
            elif name == "start_registration":
                self._cmd_start_registration(command)
            elif name == "set_target":
                self._cmd_set_target(command)
            elif name == "start_trial":
                self._cmd_start_trial()
            elif name == "insert":
                self._cmd_insert(command)
            elif name == "end_trial":
                self._cmd_end_trial()
            elif name == "get_mesh":
                return {"ok": True, "name": name, "mesh": self._mesh_payload()}
            else:
                raise BadParamsError(f"unknown command {name!r}")
        except SpineNavError as exc:
            return {"ok": False, "name": command.get("name"), "error": exc.code, "message": str(exc)}
        return {"ok": True, "name": name}

    def _require_phase(self, *phases: Phase) -> None:
        if self.phase not in phases:
            raise IllegalPhaseError(
                f"command not allowed in phase '{self.phase.value}'"
            )

    def _cmd_jog(self, command: dict) -> None:
        self._require_phase(Phase.IDLE, Phase.GUIDING, Phase.TRIAL_RUNNING)
        axis = command.get("axis")
        if axis not in JOG_AXES:
            raise BadParamsError(f"jog axis must be one of {JOG_AXES}")
        try:
            delta = float(command.get("delta"))
        except (TypeError, ValueError):
            raise BadParamsError("jog delta must be a number") from None
        result = jog(self.scenario.model, self.robot, axis, delta, timestamp=self.tick)
        if not result.rejected:
            self.robot = result.state
        if self.phase is Phase.TRIAL_RUNNING:
            self._trial_commands += 1

    def _cmd_start_calibration(self, command: dict) -> None:
        self._require_phase(Phase.IDLE, Phase.GUIDING)
        n_pairs = int(command.get("n_pairs", 30))
        if n_pairs < 3:
            raise BadParamsError("n_pairs must be at least 3")
        self._saved_phase = Phase.GUIDING if self.calibrated else Phase.IDLE
        self._saved_robot = self.robot
        self._pending_pairs = n_pairs
        self._phase_ticks_left = n_pairs
        self.phase = Phase.CALIBRATING

    def _cmd_start_registration(self, command: dict) -> None:
        self._require_phase(Phase.GUIDING)
        overrides = command.get("params")
        if overrides is not None:
            base = self.registration_params.to_json()
            base.update(overrides)
            self.registration_params = RegistrationParams.from_json(base)
        self._depth_frames = []
        self._phase_ticks_left = self.registration_views + 1
        self.phase = Phase.REGISTERING

    def _cmd_set_target(self, command: dict) -> None:
        self._require_phase(Phase.IDLE, Phase.GUIDING)
        target_id = command.get("id")
        try:
            self.scenario.target_by_id(target_id)
        except KeyError:
            raise UnknownTargetError(f"no target with id {target_id!r}") from None
        self.active_target = target_id

    def _cmd_start_trial(self) -> None:
        self._require_phase(Phase.GUIDING)
        if self.active_target is None:
            raise BadParamsError("set_target before start_trial")
        self.phase = Phase.TRIAL_RUNNING
        self._trial_start_tick = self.tick
        self._trial_commands = 0
        self.last_error_mm = None

    def _cmd_insert(self, command: dict) -> None:
        self._require_phase(Phase.TRIAL_RUNNING)
        try:
            depth = float(command.get("depth"))
        except (TypeError, ValueError):
            raise BadParamsError("insert depth must be a number") from None
        self._trial_commands += 1
        tip = simulate_insertion(self.scenario, self.robot, depth)
        truth_graph = self.scenario.truth.graph(self.scenario.model)
        target = self.scenario.target_by_id(self.active_target)
        self.last_error_mm = placement_error(tip, Frame.BASE, target, truth_graph)
        self.phase = Phase.TRIAL_COMPLETE

    def _cmd_end_trial(self) -> None:
        self._require_phase(Phase.TRIAL_RUNNING, Phase.TRIAL_COMPLETE)
        target = self.scenario.target_by_id(self.active_target)
        elapsed = (self.tick - self._trial_start_tick) * 1000.0 / self.tick_rate
        self.records.append(
            TrialRecord(
                target_id=target.id,
                target_kind=target.kind.value,
                elapsed_ms=elapsed,
                placement_error_mm=self.last_error_mm,
                command_count=self._trial_commands,
                seed=self.scenario.seed,
            )
        )
        self.phase = Phase.GUIDING
        self._trial_start_tick = None

    def _mesh_payload(self) -> dict:
        import base64
        import hashlib

        if self._spine_stl_b64 is None:
            raw = stl_bytes(self.scenario.spine_mesh)
            self._spine_stl_b64 = base64.b64encode(raw).decode("ascii")
        raw_hash = hashlib.sha256(base64.b64decode(self._spine_stl_b64)).hexdigest()
        return {
            "format": "stl",
            "frame": str(Frame.SPINE),
            "content_hash": raw_hash,
            "data_b64": self._spine_stl_b64,
        }

    # -- simulation step ----------------------------------------------------

    def _refresh_live_edges(self) -> None:
        self.graph.set_edge(Frame.BASE, Frame.EE, self.robot.end_effector, stamp=self.tick)
        marker = observe_tracker(self.scenario, self.robot, self.tick)
        self.graph.set_edge(Frame.CAMERA, Frame.MARKER, marker, stamp=self.tick)
        self.graph.set_edge(Frame.VIRTUAL, Frame.VIEWER, self.scenario.truth.virtual_from_viewer, stamp=self.tick)

    def _step_calibration(self) -> None:
        remaining = self._phase_ticks_left
        n_pairs = self._pending_pairs
        sample_index = n_pairs - remaining
        from .phantom import calibration_joint_state

        self.robot = self.scenario.model.state(calibration_joint_state(self.scenario, sample_index), self.tick)
        self._phase_ticks_left -= 1
        if self._phase_ticks_left == 0:
            from .phantom import estimate_calibration

            est, solution = estimate_calibration(self.scenario, n_pairs)
            self._calibration_solution = solution
            for edge in est.edges():
                self.graph.set_edge(edge.src, edge.dst, edge.transform, stamp=self.tick)
            self.calibrated = True
            self.robot = self._saved_robot
            self.phase = Phase.GUIDING

    def _step_registration(self) -> None:
        view_index = self.registration_views + 1 - self._phase_ticks_left
        if view_index < self.registration_views:
            viewpoint = depth_viewpoints(self.scenario, self.registration_views)[view_index]
            self._depth_frames.append(observe_depth(self.scenario, self.robot, viewpoint, view_index))
            self._phase_ticks_left -= 1
            return
        # final tick: solve on the accumulated frames
        from .phantom import registration_geometry

        box, virtual_mesh = registration_geometry(self.scenario, self.robot)
        result = register_robot(
            self._depth_frames,
            box,
            virtual_mesh,
            None,
            self.registration_params,
            self.graph,
        )
        self._registration_result = result
        self._depth_frames = []
        self._phase_ticks_left = 0
        self.registered = True
        self.phase = Phase.GUIDING

    def current_hit(self):
        try:
            return predict_hit(
                self.scenario.truth.guide.origin,
                self.scenario.truth.guide.direction,
                self.graph,
                self.scenario.spine_mesh,
            )
        except SpineNavError:
            from .guidance import HitResult

            return HitResult.miss()

    def step(self) -> dict:
        """One tick: advance phase work, refresh edges, predict, snapshot."""
        self.tick += 1
        if self.phase is Phase.CALIBRATING:
            self._step_calibration()
        elif self.phase is Phase.REGISTERING:
            self._step_registration()
        self._refresh_live_edges()
        return self.snapshot()

    def snapshot(self) -> dict:
        hit = self.current_hit()
        guide_origin = self.robot.end_effector.apply(self.scenario.truth.guide.origin)
        guide_dir = self.robot.end_effector.rotate(self.scenario.truth.guide.direction)
        edges = [
            {
                "src": str(e.src),
                "dst": str(e.dst),
                "q": [float(v) for v in e.transform.q],
                "t": [float(v) for v in e.transform.t],
                "stamp": e.stamp,
            }
            for e in self.graph.edges()
        ]
        trial_active = self.phase in (Phase.TRIAL_RUNNING, Phase.TRIAL_COMPLETE)
        elapsed = (
            (self.tick - self._trial_start_tick) * 1000.0 / self.tick_rate
            if self._trial_start_tick is not None
            else 0.0
        )
        return {
            "phase": self.phase.value,
            "tick": self.tick,
            "sim_time_ms": self.tick * 1000.0 / self.tick_rate,
            "calibrated": self.calibrated,
            "registered": self.registered,
            "robot": {
                "joints": [float(v) for v in self.robot.joint_angles],
                "ee": {"q": [float(v) for v in self.robot.end_effector.q], "t": [float(v) for v in self.robot.end_effector.t]},
            },
            "graph": edges,
            "guide": {
                "origin": [float(v) for v in guide_origin],
                "direction": [float(v) for v in guide_dir],
            },
            "hit": hit.to_dict(),
            "hit_sphere_radius_mm": HIT_SPHERE_RADIUS_MM,
            "target": self.active_target,
            "trial": {
                "active": trial_active,
                "elapsed_ms": elapsed,
                "command_count": self._trial_commands,
            },
            "metrics": {
                "elapsed_ms": elapsed,
                "last_placement_error_mm": self.last_error_mm,
            },
            "progress": {"phase_ticks_left": self._phase_ticks_left},
        }


# ---------------------------------------------------------------------------
# Command logs and replay
# ---------------------------------------------------------------------------

def save_command_log(path, entries: list[dict]) -> None:
    with open(path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")


def load_command_log(path) -> list[dict]:
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            entries.append(json.loads(line))
    return entries


def replay_log(
    scenario: Scenario,
    log: list[dict],
    tick_rate: float = 30.0,
    threads: int = 1,
    extra_ticks: int = 1,
) -> tuple[list[TrialRecord], dict]:
    """Re-run a command log in the pure tick domain.

    Each entry is {"tick": int, "command": {...}}; commands scheduled
    for a tick are applied, in order, before that tick steps.  Returns
    the trial records and the final state snapshot.
    """
    params = scenario_registration_params(seed=scenario.seed, threads=threads)
    session = Session(scenario, tick_rate=tick_rate, registration_params=params)
    by_tick: dict[int, list[dict]] = {}
    last = 0
    for entry in log:
        t = int(entry["tick"])
        by_tick.setdefault(t, []).append(entry["command"])
        last = max(last, t)
    snapshot = session.snapshot()
    for t in range(last + 1 + extra_ticks):
        for command in by_tick.get(t, ()):  # arrival order within the tick
            session.apply(command)
        snapshot = session.step()
        # auto-advancing phases may outlive the last scheduled command
    while session.phase in (Phase.CALIBRATING, Phase.REGISTERING):
        snapshot = session.step()
    return session.records, snapshot


# ---------------------------------------------------------------------------
# Scripted operator (closed loop)
# ---------------------------------------------------------------------------

class ScriptedOperator:
    """Aims the guide ray at a target with rate-limited jog commands.

    Mirrors a human at the console: rotate until the displayed ray
    passes near the displayed target, trim laterally, insert, end the
    trial.  Every command it issues is recorded with its tick, so a
    session driven by this policy doubles as a replayable log.
    """

    def __init__(self, session: Session, target_id: str, aim_tol_mm: float = 0.02, n_pairs: int = 30):
        self.session = session
        self.target_id = target_id
        self.aim_tol_mm = aim_tol_mm
        self.n_pairs = n_pairs
        self.log: list[dict] = []

    def _send(self, command: dict) -> dict:
        self.log.append({"tick": self.session.tick, "command": command})
        return self.session.apply(command)

    def _aim_command(self, snapshot: dict) -> dict | None:
        target = self.session.scenario.target_by_id(self.target_id)
        target_base = self.session.graph.query(Frame.BASE, Frame.SPINE).apply(target.position)
        origin = np.asarray(snapshot["guide"]["origin"])
        direction = np.asarray(snapshot["guide"]["direction"])
        v = target_base - origin
        dist = float(np.linalg.norm(v))
        v_hat = v / dist
        lateral = v - float(np.dot(v, direction)) * direction
        miss = float(np.linalg.norm(lateral))
        if miss <= self.aim_tol_mm:
            return None

        cross = np.cross(direction, v_hat)
        angle = float(np.degrees(np.arcsin(np.clip(np.linalg.norm(cross), -1.0, 1.0))))
        if angle > 0.02:
            axis_idx = int(np.argmax(np.abs(cross)))
            delta = float(np.clip(np.degrees(cross[axis_idx]), -2.0, 2.0))
            if abs(delta) > 1e-7:
                return {"name": "jog", "axis": ("rx", "ry", "rz")[axis_idx], "delta": delta}
        axis_idx = int(np.argmax(np.abs(lateral)))
        delta = float(np.clip(lateral[axis_idx], -5.0, 5.0))
        return {"name": "jog", "axis": ("tx", "ty", "tz")[axis_idx], "delta": delta}

    def run(self, max_ticks: int = 4000) -> TrialRecord:
        session = self.session
        snapshot = session.snapshot()
        if not session.calibrated:
            self._send({"name": "start_calibration", "n_pairs": self.n_pairs})
            while session.phase is Phase.CALIBRATING:
                snapshot = session.step()
        self._send({"name": "set_target", "id": self.target_id})
        self._send({"name": "start_trial"})
        snapshot = session.step()

        for _ in range(max_ticks):
            command = self._aim_command(snapshot)
            if command is None:
                break
            ack = self._send(command)
            snapshot = session.step()
            if not ack.get("ok"):
                raise RuntimeError(f"scripted jog rejected: {ack}")
        else:
            raise RuntimeError("scripted operator failed to aim within the tick budget")

        target = session.scenario.target_by_id(self.target_id)
        target_base = session.graph.query(Frame.BASE, Frame.SPINE).apply(target.position)
        origin = np.asarray(snapshot["guide"]["origin"])
        direction = np.asarray(snapshot["guide"]["direction"])
        depth = float(np.dot(target_base - origin, direction))
        self._send({"name": "insert", "depth": depth})
        snapshot = session.step()
        self._send({"name": "end_trial"})
        session.step()
        return session.records[-1]
