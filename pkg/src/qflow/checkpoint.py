"""Text checkpoints of flow states.

Format (version 1)::

    # qflow checkpoint
    version = 1
    config_hash = <hex digest or empty>
    kind = torus
    n = 2
    resolution = 64
    t = <float>
    lam = <float>
    dt = <float>
    energy = <float>
    steps = <int>
    clean_steps = <int>
    volume0 = <float or none>
    coefficients = <count>
    <one coefficient per line: "re im" on the torus, "value" on the sphere>
    sha256 = <digest of every preceding line>

Floats are written with ``repr``, which round-trips binary64 exactly, so a
reloaded state is bit-identical to the saved one.
"""
from __future__ import annotations

import hashlib
import os

import numpy as np

from .flow import FlowState, _finish
from .geometry import TORUS, make_geometry
from .operators import BackgroundData

VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_text(state: FlowState, config_hash: str = "") -> str:
    geom = state.geometry
    lines = [
        "# qflow checkpoint",
        f"version = {VERSION}",
        f"config_hash = {config_hash}",
        f"kind = {geom.kind}",
        f"n = {geom.n}",
        f"resolution = {geom.resolution}",
        f"t = {float(state.t)!r}",
        f"lam = {float(state.lam)!r}",
        f"dt = {float(state.dt)!r}",
        f"energy = {float(state.energy)!r}",
        f"steps = {int(state.steps)}",
        f"clean_steps = {int(state.clean_steps)}",
        f"volume0 = {'none' if state.volume0 is None else repr(float(state.volume0))}",
        f"coefficients = {state.u.coeffs.size}",
    ]
    c = state.u.coeffs.ravel()
    if geom.kind == TORUS:
        lines += [f"{float(z.real)!r} {float(z.imag)!r}" for z in c]
    else:
        lines += [repr(float(v)) for v in c]
    body = "\n".join(lines) + "\n"
    return body + f"sha256 = {hashlib.sha256(body.encode()).hexdigest()}\n"


def save_checkpoint(state: FlowState, path, config_hash: str = "") -> None:
    """Write atomically (temporary file then rename)."""
    text = checkpoint_text(state, config_hash)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def parse_checkpoint(text: str, background: BackgroundData, config_hash: str | None = None) -> FlowState:
    lines = text.splitlines()
    if not lines or not lines[-1].startswith("sha256 = "):
        raise CheckpointError("checkpoint is truncated (no checksum line)")
    body = "\n".join(lines[:-1]) + "\n"
    if hashlib.sha256(body.encode()).hexdigest() != lines[-1].split(" = ", 1)[1].strip():
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
    header = {}
    i = 0
    for i, line in enumerate(lines[:-1]):
        if line.startswith("#"):
            continue
        key, _, value = line.partition(" = ")
        header[key] = value
        if key == "coefficients":
            break
    try:
        version = int(header["version"])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if config_hash is not None and header["config_hash"] != config_hash:
            raise CheckpointError("checkpoint was written for a different configuration")
        geom = make_geometry(header["kind"], int(header["n"]), int(header["resolution"]))
        if not geom.same_as(background.geometry):
            raise CheckpointError("checkpoint geometry does not match the background")
        count = int(header["coefficients"])
        rows = lines[i + 1 : i + 1 + count]
        if len(rows) != count or count != int(np.prod(geom.spectral_shape)):
            raise CheckpointError("coefficient block is incomplete")
        if geom.kind == TORUS:
            pairs = np.array([[float(x) for x in r.split()] for r in rows])
            coeffs = np.empty(count, dtype=complex)
            coeffs.real, coeffs.imag = pairs[:, 0], pairs[:, 1]
            coeffs = coeffs.reshape(geom.spectral_shape)
        else:
            coeffs = np.array([float(r) for r in rows]).reshape(geom.spectral_shape)
        t = float(header["t"])
        dt = float(header["dt"])
        steps = int(header["steps"])
        clean = int(header["clean_steps"])
        vol0 = None if header["volume0"] == "none" else float(header["volume0"])
        lam = float(header["lam"])
        energy = float(header["energy"])
    except CheckpointError:
        raise
    except (KeyError, ValueError, IndexError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    state = _finish(t, coeffs, background, dt, steps, clean, vol0)
    if state.lam != lam or state.energy != energy:
        raise CheckpointError("stored multiplier or energy disagrees with the coefficients")
    return state


def load_checkpoint(path, background: BackgroundData, config_hash: str | None = None) -> FlowState:
    """Read a checkpoint; raises :class:`CheckpointError` without partial state."""
    with open(path) as fh:
        return parse_checkpoint(fh.read(), background, config_hash)
