"""Digital-twin TCP server.

One session per connection. Sessions share immutable case data (volume,
skin mesh, robot context); per-session state (robot joints, jobs, streams)
is mutated only under the session lock. Colormap jobs run on background
threads that fan out to the planner's worker pool; robot-state streaming
and execution simulation run on their own timer threads.
"""

import logging
import os
import socket
import threading
import time

import numpy as np
from scipy.spatial import cKDTree

from .. import planner as planner_mod
from ..errors import (
    InvalidInput,
    InvalidTrajectory,
    NeedleTwinError,
    PlanningFailed,
    ProtocolError,
)
from ..geometry import SlicePlane, invert
from ..planner import (
    NeedleTrajectory,
    Target,
    build_colormap,
    check_trajectory,
    default_robot_context,
    needle_tip_in_ct,
    plan_insertion,
)
from ..robot import forward_kinematics
from ..volume import WindowLevel, extract_skin_mesh, extract_slice, load_volume
from . import protocol

log = logging.getLogger("plan_server")

STATE_RATE_MIN_HZ = 1.0
STATE_RATE_MAX_HZ = 100.0
EXECUTION_RATE_HZ = 50.0
PROGRESS_INTERVAL_S = 0.8


class CaseData:
    """Immutable per-case bundle shared by all sessions."""

    def __init__(self, name, volume, skin, context):
        self.name = name
        self.volume = volume
        self.skin = skin
        self.context = context
        self.skin_index = context.scene.skin_index()
        self._vertex_tree = None

    def vertex_tree(self):
        if self._vertex_tree is None:
            self._vertex_tree = cKDTree(self.skin.vertices)
        return self._vertex_tree


def load_case(prefix):
    """Load a `<prefix>.vol/.volmeta` pair and build the default context."""
    volume = load_volume(prefix)
    skin = extract_skin_mesh(volume)
    context = default_robot_context(skin)
    return CaseData(os.path.basename(prefix), volume, skin, context)


class _OpError(NeedleTwinError):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class _Session:
    def __init__(self, server, conn, addr):
        self.server = server
        self.conn = conn
        self.addr = addr
        self.case = server.case
        self.lock = threading.RLock()
        self.write_lock = threading.Lock()
        self.sequence = 0
        self.events_emitted = 0
        self.robot_q = planner_mod.IDLE_Q.copy()
        self.mode = "idle"
        self.closed = threading.Event()
        self.stream_rate_hz = 0.0
        self.stream_thread = None
        self.exec_thread = None
        self.job_counter = 0
        self.jobs = {}
        self.colormap = None
        self.last_final_q = None
        self.last_trajectory = None
        self.latency_samples = []

    # ---- wire helpers ----

    def send(self, envelope):
        data = protocol.encode_envelope(envelope)
        with self.write_lock:
            try:
                self.conn.sendall(data)
            except OSError:
                self.closed.set()

    def emit_state(self, reason="stream"):
        with self.lock:
            q = self.robot_q.copy()
            self.sequence += 1
            seq = self.sequence
            mode = self.mode
        pose = forward_kinematics(self.case.context.chain, q) if self.case else None
        body = {
            "q_deg": list(np.round(q, 9)),
            "sequence": seq,
            "timestamp_ms": time.monotonic_ns() // 1_000_000,
            "mode": mode,
            "reason": reason,
        }
        if pose is not None:
            body["eef_pose"] = {
                "rotation": [list(row) for row in pose.rotation],
                "translation": list(pose.translation),
            }
        self.events_emitted += 1
        self.send(protocol.make_event("robot_state", body))

    # ---- streaming ----

    def start_stream(self, rate_hz):
        with self.lock:
            self.stream_rate_hz = rate_hz
            if self.stream_thread is None or not self.stream_thread.is_alive():
                self.stream_thread = threading.Thread(
                    target=self._stream_loop, name="state-stream", daemon=True
                )
                self.stream_thread.start()

    def stop_stream(self):
        with self.lock:
            self.stream_rate_hz = 0.0

    def _stream_loop(self):
        next_t = time.monotonic()
        while not self.closed.is_set():
            with self.lock:
                rate = self.stream_rate_hz
            if rate <= 0:
                return
            period = 1.0 / rate
            next_t += period
            self.emit_state("stream")
            delay = next_t - time.monotonic()
            if delay > 0:
                if self.closed.wait(delay):
                    return
            else:
                next_t = time.monotonic()  # fell behind; resynchronize


def _parse_plane(obj):
    try:
        return SlicePlane(
            obj["origin"],
            obj["axis_u"],
            obj["axis_v"],
            float(obj["extent_u"]),
            float(obj["extent_v"]),
            float(obj["resolution"]),
        )
    except (KeyError, TypeError, ValueError, InvalidInput) as exc:
        raise _OpError("BAD_PLANE", f"invalid slice plane: {exc}") from exc


def _parse_target(obj):
    try:
        return Target(obj.get("id", "target"), obj["position"], obj.get("label", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise _OpError("BAD_TARGET", f"invalid target: {exc}") from exc


def _parse_trajectory(obj):
    try:
        target = _parse_target(obj["target"])
        return NeedleTrajectory(
            target, obj["insertion_point"], float(obj.get("max_hu", 0.0))
        )
    except _OpError:
        raise
    except (KeyError, TypeError, ValueError, InvalidTrajectory) as exc:
        raise _OpError("BAD_TRAJECTORY", f"invalid trajectory: {exc}") from exc


def _trajectory_body(traj):
    return {
        "target": {
            "id": traj.target.id,
            "position": list(traj.target.position),
            "label": traj.target.label,
        },
        "insertion_point": list(traj.insertion_point),
        "insertion_depth": traj.insertion_depth,
        "punch_offset": traj.punch_offset,
        "max_hu": traj.max_hu,
    }


class PlanServer:
    """Threaded TCP server exposing the planning engine as a digital twin."""

    def __init__(
        self,
        case=None,
        host="127.0.0.1",
        port=0,
        workers=1,
        time_scale=1.0,
    ):
        self.case = case
        self.host = host
        self._requested_port = port
        self.workers = max(1, int(workers))
        self.time_scale = float(time_scale)
        self._listener = None
        self._accept_thread = None
        self._sessions = []
        self._sessions_lock = threading.Lock()
        self._stopping = threading.Event()
        self.port = None

    # ---- lifecycle ----

    def start(self):
        self._listener = socket.create_server((self.host, self._requested_port))
        self.port = self._listener.getsockname()[1]
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="accept", daemon=True
        )
        self._accept_thread.start()
        log.info("listening on %s:%d", self.host, self.port)
        return self

    def stop(self):
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._sessions_lock:
            sessions = list(self._sessions)
        for session in sessions:
            session.closed.set()
            try:
                session.conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                session.conn.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)

    def serve_forever(self):
        try:
            while not self._stopping.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                conn, addr = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            session = _Session(self, conn, addr)
            with self._sessions_lock:
                self._sessions.append(session)
            threading.Thread(
                target=self._session_loop, args=(session,), name=f"session-{addr[1]}", daemon=True
            ).start()

    # ---- per-connection loop ----

    def _session_loop(self, session):
        decoder = protocol.FrameDecoder()
        log.debug("session %s connected", session.addr)
        try:
            while not session.closed.is_set():
                try:
                    data = session.conn.recv(65536)
                except OSError:
                    break
                if not data:
                    break
                try:
                    payloads = decoder.feed(data)
                except ProtocolError as exc:
                    # framing is unrecoverable: report then disconnect cleanly
                    session.send(protocol.make_error(None, "", "BAD_FRAME", str(exc)))
                    break
                for payload in payloads:
                    self._handle_payload(session, payload)
        finally:
            session.closed.set()
            try:
                session.conn.close()
            except OSError:
                pass
            with self._sessions_lock:
                if session in self._sessions:
                    self._sessions.remove(session)
            log.debug("session %s closed", session.addr)

    def _handle_payload(self, session, payload):
        try:
            envelope = protocol.decode_envelope(payload)
        except ProtocolError as exc:
            session.send(protocol.make_error(None, "", "BAD_ENVELOPE", str(exc)))
            return
        if envelope["kind"] != "request":
            session.send(
                protocol.make_error(
                    envelope.get("id"), envelope.get("op"), "BAD_ENVELOPE",
                    "server accepts only request envelopes",
                )
            )
            return
        req_id = envelope.get("id")
        op = envelope["op"]
        handler = self._OPS.get(op)
        if handler is None:
            session.send(protocol.make_error(req_id, op, "UNKNOWN_OP", f"unknown op {op!r}"))
            return
        try:
            body = handler(self, session, envelope.get("body") or {})
            session.send(protocol.make_response(req_id, op, body))
        except _OpError as exc:
            session.send(protocol.make_error(req_id, op, exc.code, str(exc)))
        except Exception as exc:  # never let a handler kill the connection
            log.exception("handler %s failed", op)
            session.send(protocol.make_error(req_id, op, "INTERNAL", f"{type(exc).__name__}: {exc}"))

    # ---- op handlers ----

    def _require_case(self, session):
        if session.case is None:
            raise _OpError("NO_CASE", "no case loaded")
        return session.case

    def _op_ping(self, session, body):
        return {"pong": True, "time_ms": time.monotonic_ns() // 1_000_000}

    def _op_load_case(self, session, body):
        prefix = body.get("case")
        if not isinstance(prefix, str) or not prefix:
            raise _OpError("NO_CASE", "body.case must be a path prefix")
        try:
            case = load_case(prefix)
        except (OSError, NeedleTwinError) as exc:
            raise _OpError("NO_CASE", f"cannot load case {prefix!r}: {exc}") from exc
        with session.lock:
            session.case = case
        if self.case is None:
            self.case = case  # late-bound shared case for new sessions
        return {
            "case": case.name,
            "dims": list(case.volume.dims),
            "spacing_mm": list(case.volume.spacing),
            "n_vertices": case.skin.n_vertices,
            "n_triangles": case.skin.n_triangles,
        }

    def _op_get_case(self, session, body):
        case = self._require_case(session)
        return {
            "case": case.name,
            "dims": list(case.volume.dims),
            "spacing_mm": list(case.volume.spacing),
            "origin_mm": list(case.volume.origin),
        }

    def _op_get_skin_model(self, session, body):
        case = self._require_case(session)
        out = {
            "vertices": protocol.encode_array(case.skin.vertices.astype(np.float32)),
            "triangles": protocol.encode_array(case.skin.triangles.astype(np.int32)),
        }
        with session.lock:
            colormap = session.colormap
        if colormap is not None:
            points = np.array([c.surface_point for c in colormap.candidates])
            tree = cKDTree(points)
            _, nearest = tree.query(case.skin.vertices)
            max_hu = np.array([colormap.candidates[i].max_hu for i in nearest], dtype=np.float32)
            feasible = np.array(
                [colormap.candidates[i].feasible for i in nearest], dtype=np.uint8
            )
            out["colormap"] = {
                "target_id": colormap.target_id,
                "vertex_max_hu": protocol.encode_array(max_hu),
                "vertex_feasible": protocol.encode_array(feasible),
            }
        return out

    def _op_get_slice(self, session, body):
        case = self._require_case(session)
        plane = _parse_plane(body.get("plane") or {})
        window = None
        wl = body.get("window")
        if wl is not None:
            try:
                window = WindowLevel(float(wl["center"]), float(wl["width"]))
            except (KeyError, TypeError, ValueError, InvalidInput) as exc:
                raise _OpError("BAD_PLANE", f"invalid window: {exc}") from exc
        image = extract_slice(case.volume, plane, window)
        return {
            "image": protocol.encode_array(image.astype(np.float32)),
            "plane": {
                "origin": list(plane.origin),
                "axis_u": list(plane.axis_u),
                "axis_v": list(plane.axis_v),
                "extent_u": plane.extent_u,
                "extent_v": plane.extent_v,
                "resolution": plane.resolution,
            },
        }

    def _op_request_colormap(self, session, body):
        case = self._require_case(session)
        target = _parse_target(body.get("target") or {})
        if not case.skin_index.contains(target.position):
            raise _OpError("BAD_TARGET", "target lies outside the skin model")
        spacing = float(body.get("spacing", planner_mod.DEFAULT_CANDIDATE_SPACING_MM))
        with session.lock:
            session.job_counter += 1
            job_id = f"cm-{session.job_counter}"
            session.jobs[job_id] = {"fraction": 0.0, "done": False}
        threading.Thread(
            target=self._colormap_job,
            args=(session, job_id, case, target, spacing),
            name=f"job-{job_id}",
            daemon=True,
        ).start()
        return {"job_id": job_id}

    def _colormap_job(self, session, job_id, case, target, spacing):
        state = {"fraction": 0.0, "lock": threading.Lock(), "done": False}

        def on_progress(fraction):
            with state["lock"]:
                state["fraction"] = max(state["fraction"], fraction)

        def ticker():
            while not state["done"] and not session.closed.is_set():
                with state["lock"]:
                    fraction = state["fraction"]
                session.send(
                    protocol.make_event(
                        "colormap_progress", {"job_id": job_id, "fraction": fraction}
                    )
                )
                time.sleep(PROGRESS_INTERVAL_S)

        tick_thread = threading.Thread(target=ticker, name=f"tick-{job_id}", daemon=True)
        tick_thread.start()
        try:
            colormap = build_colormap(
                target,
                case.volume,
                case.skin,
                case.context,
                workers=self.workers,
                spacing=spacing,
                progress=on_progress,
            )
            with session.lock:
                session.colormap = colormap
                session.jobs[job_id] = {"fraction": 1.0, "done": True}
            body = {
                "job_id": job_id,
                "colormap": {
                    "target_id": colormap.target_id,
                    "spacing": colormap.spacing,
                    "generation_time_s": colormap.generation_time,
                    "candidates": [
                        {
                            "point": list(c.surface_point),
                            "max_hu": c.max_hu,
                            "feasible": c.feasible,
                            "reason": c.fail_reason,
                        }
                        for c in colormap.candidates
                    ],
                },
            }
            state["done"] = True
            tick_thread.join()
            session.send(protocol.make_event("colormap_ready", body))
        except NeedleTwinError as exc:
            state["done"] = True
            tick_thread.join()
            session.send(
                protocol.make_event(
                    "colormap_failed", {"job_id": job_id, "message": str(exc)}
                )
            )

    def _op_check_feasibility(self, session, body):
        case = self._require_case(session)
        trajectory = _parse_trajectory(body.get("trajectory") or {})
        feasible, reason, paths = check_trajectory(trajectory, case.context)
        out = {"feasible": feasible, "reason": reason}
        if paths is not None:
            out["waypoint_count"] = len(paths[0]) + len(paths[1]) - 1
        return out

    def _op_plan_execute(self, session, body):
        case = self._require_case(session)
        trajectory = _parse_trajectory(body.get("trajectory") or {})
        driver = bool(body.get("driver", False))
        with session.lock:
            if self.time_scale <= 0:
                raise _OpError("PLAN_FAILED", "server time_scale must be positive")
            if session.mode == "executing":
                raise _OpError("BUSY", "a plan is already executing in this session")
            if driver:
                session.mode = "planning"
        try:
            plan = plan_insertion(trajectory, case.context)
        except (PlanningFailed, NeedleTwinError) as exc:
            with session.lock:
                if session.mode == "planning":
                    session.mode = "idle"
            stage = getattr(exc, "stage", "")
            raise _OpError("PLAN_FAILED", f"{exc} (stage: {stage})") from exc
        summary = {
            "waypoint_count": len(plan.waypoints),
            "duration_s": plan.duration_s,
            "stages": {k: list(v) for k, v in plan.stages.items()},
            "driver": driver,
        }
        if not driver:
            return summary
        with session.lock:
            session.mode = "executing"
            session.last_trajectory = trajectory
        session.exec_thread = threading.Thread(
            target=self._execute_plan,
            args=(session, plan, trajectory),
            name="execute",
            daemon=True,
        )
        session.exec_thread.start()
        return summary

    def _execute_plan(self, session, plan, trajectory):
        period = 1.0 / EXECUTION_RATE_HZ
        t_sim = 0.0
        while t_sim < plan.duration_s and not session.closed.is_set():
            with session.lock:
                session.robot_q = plan.sample(t_sim)
            session.emit_state("executing")
            time.sleep(period / self.time_scale)
            t_sim += period
        with session.lock:
            session.robot_q = plan.waypoints[-1].copy()
            session.mode = "idle"
            session.last_final_q = plan.waypoints[plan.stages["stroke"][1] - 1].copy()
        session.emit_state("executing")
        session.send(
            protocol.make_event(
                "execution_done",
                {
                    "final_q_deg": list(plan.waypoints[-1]),
                    "stroke_final_q_deg": list(session.last_final_q),
                    "trajectory": _trajectory_body(trajectory),
                },
            )
        )

    def _op_subscribe_state(self, session, body):
        rate = body.get("rate_hz", 10.0)
        try:
            rate = float(rate)
        except (TypeError, ValueError) as exc:
            raise _OpError("BAD_RATE", f"rate_hz must be a number: {exc}") from exc
        if not (STATE_RATE_MIN_HZ <= rate <= STATE_RATE_MAX_HZ):
            raise _OpError(
                "BAD_RATE",
                f"rate_hz must be within [{STATE_RATE_MIN_HZ}, {STATE_RATE_MAX_HZ}]",
            )
        session.start_stream(rate)
        return {"subscribed": True, "rate_hz": rate}

    def _op_unsubscribe_state(self, session, body):
        session.stop_stream()
        return {"subscribed": False}

    def _op_report_latency(self, session, body):
        samples = body.get("samples_ms")
        if not isinstance(samples, list) or not all(
            isinstance(x, (int, float)) for x in samples
        ):
            raise _OpError("BAD_ENVELOPE", "samples_ms must be a list of numbers")
        with session.lock:
            session.latency_samples.extend(float(x) for x in samples)
            session.latency_samples = session.latency_samples[-10000:]
        return {"count": len(samples)}

    def _op_get_stats(self, session, body):
        with session.lock:
            samples = np.array(session.latency_samples, dtype=float)
            out = {
                "events_emitted": session.events_emitted,
                "sequence": session.sequence,
                "mode": session.mode,
                "jobs": {k: dict(v) for k, v in session.jobs.items()},
            }
        if len(samples):
            out["latency_ms"] = {
                "count": int(len(samples)),
                "p50": float(np.percentile(samples, 50)),
                "p95": float(np.percentile(samples, 95)),
                "mean": float(samples.mean()),
            }
        else:
            out["latency_ms"] = {"count": 0}
        return out

    def _op_evaluate_execution(self, session, body):
        case = self._require_case(session)
        with session.lock:
            q_final = session.last_final_q
            trajectory = session.last_trajectory
        if q_final is None or trajectory is None:
            raise _OpError("NO_EXECUTION", "no executed plan in this session")
        tip = needle_tip_in_ct(q_final, case.context)
        direction = trajectory.direction
        extended = tip + trajectory.punch_offset * direction
        return {
            "tip_ct": list(tip),
            "tip_to_target_mm": float(
                np.linalg.norm(tip - trajectory.target.position)
            ),
            "extended_tip_to_target_mm": float(
                np.linalg.norm(extended - trajectory.target.position)
            ),
            "commanded_tip_error_mm": float(
                np.linalg.norm(tip - trajectory.commanded_tip())
            ),
        }

    _OPS = {
        "ping": _op_ping,
        "load_case": _op_load_case,
        "get_case": _op_get_case,
        "get_skin_model": _op_get_skin_model,
        "get_slice": _op_get_slice,
        "request_colormap": _op_request_colormap,
        "check_feasibility": _op_check_feasibility,
        "plan_execute": _op_plan_execute,
        "subscribe_state": _op_subscribe_state,
        "unsubscribe_state": _op_unsubscribe_state,
        "report_latency": _op_report_latency,
        "get_stats": _op_get_stats,
        "evaluate_execution": _op_evaluate_execution,
    }
