"""Vectorised environment server over newline-delimited JSON.

Every request and response is one JSON object per line. A connection must
open with a handshake::

    -> {"type": "hello", "version": 1}
    <- {"type": "hello", "version": 1, "server": "slaterl-env"}

then any of::

    {"type": "reset", "seed": 3, "user_context": [...]}   user_context optional
    {"type": "step", "session": tok, "action": 4}
    {"type": "batch_step", "sessions": [tok, ...], "actions": [4, ...]}
    {"type": "close", "session": tok}

``reset`` opens an environment session and returns its token. Sessions are
shared server-wide (a token may be used from any connection), but each is
stepped under its own lock. Errors come back as ``{"type": "error",
"error": <kind>, "message": ...}`` and leave the connection open.
"""
import json
import secrets
import socket
import socketserver
import threading

import numpy as np

from .env import Page, SlateEnv, SlateState, StepResult
from .errors import SlateRLError

PROTOCOL_VERSION = 1


def state_to_wire(state):
    return {
        "user_context": list(state.user_context),
        "chosen_items": list(state.chosen_items),
        "page_index": state.page_index,
        "step_index": state.step_index,
        "history": [[list(p.items), list(p.feedback)] for p in state.history],
        "terminal": state.terminal,
    }


def state_from_wire(d):
    return SlateState(tuple(float(x) for x in d["user_context"]), tuple(d["chosen_items"]),
                      d["page_index"], d["step_index"],
                      tuple(Page(tuple(i), tuple(f)) for i, f in d["history"]), d["terminal"])


def result_to_wire(res):
    info = {k: list(v) if isinstance(v, tuple) else v for k, v in res.info.items()}
    return {"next_state": state_to_wire(res.next_state), "reward": res.reward,
            "done": res.done, "info": info}


def result_from_wire(d):
    info = {k: tuple(v) if isinstance(v, list) else v for k, v in d["info"].items()}
    return StepResult(state_from_wire(d["next_state"]), d["reward"], d["done"], info)


class ProtocolError(SlateRLError):
    pass


class _Session:
    def __init__(self, env):
        self.env = env
        self.lock = threading.Lock()


class EnvService:
    """Session table and request dispatch, independent of the transport."""

    def __init__(self, env_factory):
        self.env_factory = env_factory
        self.sessions = {}
        self.lock = threading.Lock()

    def _get(self, token):
        with self.lock:
            sess = self.sessions.get(token)
        if sess is None:
            raise ProtocolError(f"unknown session token {token!r}")
        return sess

    def _step(self, token, action):
        sess = self._get(token)
        with sess.lock:
            if not isinstance(action, int) or isinstance(action, bool):
                raise ProtocolError("action must be an integer item id")
            res = sess.env.step(action)
            return result_to_wire(res), [int(a) for a in sess.env.action_mask()]

    def handle(self, msg):
        kind = msg.get("type")
        if kind == "reset":
            env = self.env_factory()
            ctx = msg.get("user_context")
            state = env.reset(None if ctx is None else np.asarray(ctx, dtype=float),
                              seed=msg.get("seed", 0))
            token = secrets.token_hex(16)
            with self.lock:
                self.sessions[token] = _Session(env)
            return {"type": "reset", "session": token, "state": state_to_wire(state),
                    "mask": [int(a) for a in env.action_mask()]}
        if kind == "step":
            res, mask = self._step(msg.get("session"), msg.get("action"))
            return {"type": "step", "session": msg["session"], **res, "mask": mask}
        if kind == "batch_step":
            tokens, actions = msg.get("sessions"), msg.get("actions")
            if not isinstance(tokens, list) or not isinstance(actions, list) or len(tokens) != len(actions):
                raise ProtocolError("batch_step needs equal-length 'sessions' and 'actions' lists")
            results = []
            for tok, a in zip(tokens, actions):
                try:
                    res, mask = self._step(tok, a)
                    results.append({"ok": True, "session": tok, **res, "mask": mask})
                except SlateRLError as exc:
                    results.append({"ok": False, "session": tok, "error": type(exc).__name__,
                                    "message": str(exc)})
            return {"type": "batch_step", "results": results}
        if kind == "close":
            token = msg.get("session")
            with self.lock:
                if self.sessions.pop(token, None) is None:
                    raise ProtocolError(f"unknown session token {token!r}")
            return {"type": "close", "session": token}
        raise ProtocolError(f"unknown message type {kind!r}")


def _error(kind, message):
    return {"type": "error", "error": kind, "message": message}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service = self.server.service
        greeted = False
        for raw in self.rfile:
            try:
                msg = json.loads(raw)
                if not isinstance(msg, dict):
                    raise ValueError("message must be a JSON object")
            except ValueError as exc:
                reply = _error("MalformedMessage", str(exc))
            else:
                if msg.get("type") == "hello":
                    if msg.get("version") != PROTOCOL_VERSION:
                        reply = _error("VersionMismatch", f"server speaks version {PROTOCOL_VERSION}")
                    else:
                        greeted = True
                        reply = {"type": "hello", "version": PROTOCOL_VERSION, "server": "slaterl-env"}
                elif not greeted:
                    reply = _error("HandshakeRequired", "send a hello message first")
                else:
                    try:
                        reply = service.handle(msg)
                    except SlateRLError as exc:
                        reply = _error(type(exc).__name__, str(exc))
                    except (TypeError, ValueError, KeyError) as exc:
                        reply = _error("MalformedMessage", str(exc))
            try:
                self.wfile.write((json.dumps(reply) + "\n").encode())
                self.wfile.flush()
            except OSError:
                return


class EnvServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, env_factory):
        super().__init__(address, _Handler)
        self.service = EnvService(env_factory)


def make_env_factory(model, catalog, config, user_sampler=None):
    return lambda: SlateEnv(model, catalog, config, user_sampler)


def serve_in_thread(env_factory, host="127.0.0.1", port=0):
    """Start a server on a background thread; returns ``(server, (host, port))``."""
    server = EnvServer((host, port), env_factory)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    return server, server.server_address


class RemoteError(SlateRLError):
    def __init__(self, kind, message):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class EnvClient:
    """Blocking client for :class:`EnvServer`."""

    def __init__(self, host, port, timeout=30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")
        reply = self.request({"type": "hello", "version": PROTOCOL_VERSION})
        self.server_name = reply["server"]

    def request(self, msg):
        self.sock.sendall((json.dumps(msg) + "\n").encode())
        return self._read()

    def send_raw(self, line):
        self.sock.sendall(line if isinstance(line, bytes) else line.encode())
        return self._read()

    def _read(self):
        line = self.rfile.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        reply = json.loads(line)
        if reply.get("type") == "error":
            raise RemoteError(reply["error"], reply["message"])
        return reply

    def reset(self, seed=0, user_context=None):
        msg = {"type": "reset", "seed": seed}
        if user_context is not None:
            msg["user_context"] = [float(x) for x in user_context]
        r = self.request(msg)
        return r["session"], state_from_wire(r["state"])

    def step(self, session, action):
        return result_from_wire(self.request({"type": "step", "session": session, "action": int(action)}))

    def batch_step(self, sessions, actions):
        r = self.request({"type": "batch_step", "sessions": list(sessions),
                          "actions": [int(a) for a in actions]})
        return [result_from_wire(x) if x["ok"] else RemoteError(x["error"], x["message"])
                for x in r["results"]]

    def close_session(self, session):
        self.request({"type": "close", "session": session})

    def close(self):
        self.rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
