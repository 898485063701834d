"""Fuse a base and a distilled checkpoint into a spectrum of models

theta_alpha = (1 - alpha) * theta_base + alpha * theta_distilled, per element.
"""
from __future__ import annotations
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .const import (DType, ALPHA_DENSITIES, format_alpha,
    IncompatibleCheckpointsError, NonFiniteTensorError)
from .checkpoints import (TensorSet, CheckpointManifest, CheckpointWriter,
    read_manifest, validate_compat, read_tensor, widen, narrow, sha256_file)

import logging
log = logging.getLogger('dartpipe')

COMPUTE_PRECISIONS = ['WIDEN_TO_F32']

# Elements blended per step, to keep the float64 scratch space small
BLEND_CHUNK = 1 << 20

def check_alpha(alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")

def check_alpha_grid(grid: list[float]):
    for alpha in grid:
        check_alpha(alpha)
    for lo, hi in zip(grid, grid[1:]):
        if not hi > lo:
            raise ValueError(f"alpha grid must be strictly increasing, got {lo} before {hi}")

def alpha_grid_preset(points) -> list[float]:
    """Evenly spaced grid over [0, 1]

    @param points: number of grid points, or a density name from ALPHA_DENSITIES
    """
    if isinstance(points, str):
        if points not in ALPHA_DENSITIES:
            raise ValueError(f"Unknown alpha density '{points}'. Choose from {sorted(ALPHA_DENSITIES)}")
        points = ALPHA_DENSITIES[points]
    if points < 2:
        raise ValueError(f"An alpha grid needs at least 2 points, got {points}")
    return [round(float(a), 3) for a in np.linspace(0.0, 1.0, points)]

@dataclass
class FusionSpec:
    """ What to fuse, and where to put it

    With alpha_grid set, output_path is a directory and one checkpoint per
    alpha is written there. Otherwise output_path is the single output file.
    """
    alpha: float = 0.5
    base_path: Path = None
    distilled_path: Path = None
    output_path: Path = None
    compute_precision: str = 'WIDEN_TO_F32'
    alpha_grid: Optional[list[float]] = None
    allow_nonfinite: bool = False

    def __post_init__(self):
        check_alpha(self.alpha)
        if self.compute_precision not in COMPUTE_PRECISIONS:
            raise ValueError(f"Unsupported compute precision '{self.compute_precision}'")
        if self.alpha_grid is not None:
            self.alpha_grid = [float(a) for a in self.alpha_grid]
            check_alpha_grid(self.alpha_grid)
        for attr in ['base_path', 'distilled_path', 'output_path']:
            value = getattr(self, attr)
            if value is not None:
                setattr(self, attr, Path(value))


def _check_finite(name: str, values: np.ndarray):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        index = int(bad[0])
        raise NonFiniteTensorError(name, index, float(values.reshape(-1)[index]))

def blend(base: np.ndarray, distilled: np.ndarray, alpha: float) -> np.ndarray:
    """Blend two float32 arrays, returning float32

    Each element is evaluated in float64 and rounded once to float32, so
    the result is within half an ulp of the exact blend of the widened
    inputs, and blend(b, d, a) == blend(d, b, 1 - a).
    """
    # endpoints copy so signed zeros survive
    if alpha == 0.0:
        return np.array(base, dtype=np.float32)
    if alpha == 1.0:
        return np.array(distilled, dtype=np.float32)
    w_base = 1.0 - alpha
    w_distilled = alpha
    out = np.empty(base.shape, dtype=np.float32)
    flat_b = base.reshape(-1)
    flat_d = distilled.reshape(-1)
    flat_out = out.reshape(-1)
    for start in range(0, flat_b.size, BLEND_CHUNK):
        stop = start + BLEND_CHUNK
        b = flat_b[start:stop].astype(np.float64)
        d = flat_d[start:stop].astype(np.float64)
        flat_out[start:stop] = (w_base * b + w_distilled * d).astype(np.float32)
    return out

def interpolate_tensor(name: str, dtype: DType, base: np.ndarray, distilled: np.ndarray,
    alpha: float, allow_nonfinite: bool=False) -> np.ndarray:
    """Fuse one tensor given in storage form, returning storage form"""
    b = widen(dtype, base)
    d = widen(dtype, distilled)
    if not allow_nonfinite:
        _check_finite(name, b)
        _check_finite(name, d)
    return narrow(dtype, blend(b, d, alpha))

def interpolate(base: TensorSet, distilled: TensorSet, alpha: float,
    allow_nonfinite: bool=False) -> TensorSet:
    """Fuse two in-memory TensorSets

    @param alpha: 0 reproduces base, 1 reproduces distilled
    @param allow_nonfinite: propagate NaN/Inf instead of aborting
    @returns: a TensorSet mirroring base's names, shapes and dtypes
    """
    check_alpha(alpha)
    report = validate_compat(base.manifest(), distilled.manifest())
    if not report.is_fusable:
        raise IncompatibleCheckpointsError(f"Checkpoints can't be fused: {report}")

    fused = TensorSet(base.metadata)
    for name in base:
        dtype = base.dtype(name)
        storage = interpolate_tensor(name, dtype, base.storage(name), distilled.storage(name),
            alpha, allow_nonfinite)
        fused.add(name, dtype, storage, base.shape(name))
    return fused


def sweep_filename(stem: str, alpha: float) -> str:
    return f"{stem}-alpha{format_alpha(alpha)}.safetensors"

def provenance_metadata(base: CheckpointManifest, alpha: float,
    base_sha256: str, distilled_sha256: str) -> dict[str, str]:
    metadata = dict(base.metadata)
    metadata['dart.alpha'] = format_alpha(alpha)
    metadata['dart.base_sha256'] = base_sha256
    metadata['dart.distilled_sha256'] = distilled_sha256
    return metadata

def _free_bytes(directory: Path) -> int:
    return shutil.disk_usage(directory).free

def fuse_many(base_path: Path, distilled_path: Path, targets: list[tuple[float, Path]],
    allow_nonfinite: bool=False) -> tuple[list[Path], dict[Path, str]]:
    """Write one fused checkpoint per (alpha, path) target

    Each input tensor is read once and blended into every output, so peak
    memory stays around three copies of the largest tensor.

    @returns: (written paths, {path: reason} for outputs that failed)
    """
    base = read_manifest(base_path)
    distilled = read_manifest(distilled_path)
    report = validate_compat(base, distilled)
    if not report.is_fusable:
        raise IncompatibleCheckpointsError(f"Checkpoints can't be fused: {report}")

    log.info(f"Hashing inputs {base_path} and {distilled_path}...")
    base_sha = sha256_file(base_path)
    distilled_sha = sha256_file(distilled_path)

    failed: dict[Path, str] = {}
    writers: list[tuple[float, CheckpointWriter]] = []
    reserved: dict[Path, int] = {}
    for alpha, path in targets:
        path = Path(path)
        metadata = provenance_metadata(base, alpha, base_sha, distilled_sha)
        writer = CheckpointWriter(path, base.tensors, metadata)
        directory = path.parent
        directory.mkdir(parents=True, exist_ok=True)
        needed = reserved.get(directory, 0) + writer.expected_size
        if needed > _free_bytes(directory):
            reason = f"insufficient disk space: needs {writer.expected_size} bytes"
            log.error(f"Cannot write {path}: {reason}")
            failed[path] = reason
            continue
        reserved[directory] = needed
        writers.append((alpha, writer.open()))

    try:
        with open(base_path, 'rb') as bfp, open(distilled_path, 'rb') as dfp:
            for meta in base.tensors:
                b_storage = read_tensor(bfp, base, meta)
                d_storage = read_tensor(dfp, distilled, distilled[meta.name])
                b = widen(meta.dtype, b_storage)
                d = widen(meta.dtype, d_storage)
                if not allow_nonfinite:
                    _check_finite(meta.name, b)
                    _check_finite(meta.name, d)
                log.debug(f"Fusing tensor {meta.name} {list(meta.shape)} into {len(writers)} outputs")
                for alpha, writer in list(writers):
                    try:
                        writer.write(meta.name, narrow(meta.dtype, blend(b, d, alpha)))
                    except OSError as e:
                        log.error(f"Failed writing {writer.path}: {e}")
                        writer.abort()
                        failed[writer.path] = str(e)
                        writers.remove((alpha, writer))
    except Exception:
        for _, writer in writers:
            writer.abort()
        raise

    written = []
    for alpha, writer in writers:
        try:
            written.append(writer.close())
            log.info(f"Wrote fused checkpoint alpha={format_alpha(alpha)} to {writer.path}")
        except OSError as e:
            log.error(f"Failed finishing {writer.path}: {e}")
            writer.abort()
            failed[writer.path] = str(e)
    return written, failed

def fuse(spec: FusionSpec) -> Path:
    """Write a single fused checkpoint at spec.alpha to spec.output_path"""
    written, failed = fuse_many(spec.base_path, spec.distilled_path,
        [(spec.alpha, spec.output_path)], spec.allow_nonfinite)
    if failed:
        raise OSError(f"Fusion output failed: {failed[spec.output_path]}")
    return written[0]

def sweep(spec: FusionSpec) -> list[Path]:
    """Write one fused checkpoint per alpha of spec.alpha_grid into spec.output_path

    Filenames embed alpha with 3 decimals. An empty grid is a no-op.
    """
    grid = spec.alpha_grid or []
    if not grid:
        log.warning("Empty alpha grid, nothing to fuse.")
        return []

    stem = spec.base_path.stem
    targets = [(alpha, spec.output_path / sweep_filename(stem, alpha)) for alpha in grid]
    written, failed = fuse_many(spec.base_path, spec.distilled_path, targets, spec.allow_nonfinite)
    if failed:
        summary = ', '.join(f"{p.name} ({reason})" for p, reason in failed.items())
        raise OSError(f"{len(failed)} of {len(targets)} fused outputs failed: {summary}")
    return written
