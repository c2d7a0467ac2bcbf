"""Pixel correspondences: JSON-lines ingestion, ground-truth synthesis, outlier filtering.

Match file format, one JSON object per line::

    {"vi": "0", "vj": "1", "pi": [u, v], "pj": [u, v], "conf": 0.93}

Pixel coordinates put pixel centers at integers. Extra keys are ignored on
load; synthetic scenes add ``"gt_outlier"`` so tests can score the filter.

Exporting from an external matcher: for every image pair run the matcher,
keep keypoint pairs in the same pixel convention (subtract 0.5 from
corner-origin coordinates), and write one line per correspondence.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, UnknownViewId
from .geometry import Camera, lift_pixels, project_points
from .model import HybridModel

log = logging.getLogger(__name__)

OUTLIER_MIN_ERROR_PX = 20.0


@dataclass(frozen=True)
class MatchPair:
    view_i: str
    view_j: str
    p_i: np.ndarray
    p_j: np.ndarray
    confidence: float = 1.0


@dataclass
class MatchSet:
    view_i: list[str] = field(default_factory=list)
    view_j: list[str] = field(default_factory=list)
    p_i: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    p_j: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gt_outlier: np.ndarray | None = None
    dropped: int = 0

    def __post_init__(self):
        self.view_i = [str(v) for v in self.view_i]
        self.view_j = [str(v) for v in self.view_j]
        self.p_i = np.asarray(self.p_i, dtype=np.float64).reshape(-1, 2)
        self.p_j = np.asarray(self.p_j, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        n = len(self.view_i)
        if not (len(self.view_j) == len(self.p_i) == len(self.p_j) == len(self.confidence) == n):
            raise ValueError("match set fields have inconsistent lengths")
        if any(a == b for a, b in zip(self.view_i, self.view_j)):
            raise ValueError("a match must connect two different views")
        self._build_index()

    def _build_index(self):
        self.index: dict[tuple[str, str], np.ndarray] = {}
        groups: dict[tuple[str, str], list[int]] = {}
        for k, key in enumerate(zip(self.view_i, self.view_j)):
            groups.setdefault(key, []).append(k)
        self.index = {k: np.array(v, dtype=np.int64) for k, v in groups.items()}

    def __len__(self) -> int:
        return len(self.view_i)

    def __getitem__(self, k: int) -> MatchPair:
        return MatchPair(self.view_i[k], self.view_j[k], self.p_i[k].copy(), self.p_j[k].copy(), float(self.confidence[k]))

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    def subset(self, idx) -> "MatchSet":
        idx = np.asarray(idx, dtype=np.int64)
        return MatchSet(
            [self.view_i[k] for k in idx],
            [self.view_j[k] for k in idx],
            self.p_i[idx],
            self.p_j[idx],
            self.confidence[idx],
            None if self.gt_outlier is None else self.gt_outlier[idx],
        )

    @classmethod
    def concat(cls, sets) -> "MatchSet":
        sets = list(sets)
        if not sets:
            return cls()
        labels = None
        if all(s.gt_outlier is not None for s in sets):
            labels = np.concatenate([s.gt_outlier for s in sets])
        return cls(
            sum((s.view_i for s in sets), []),
            sum((s.view_j for s in sets), []),
            np.concatenate([s.p_i for s in sets]),
            np.concatenate([s.p_j for s in sets]),
            np.concatenate([s.confidence for s in sets]),
            labels,
        )

    def deduplicated(self) -> "MatchSet":
        seen, keep = set(), []
        for k in range(len(self)):
            key = (self.view_i[k], self.view_j[k], float(self.p_i[k, 0]), float(self.p_i[k, 1]))
            if key not in seen:
                seen.add(key)
                keep.append(k)
        if len(keep) == len(self):
            return self
        out = self.subset(keep)
        out.dropped = self.dropped + len(self) - len(keep)
        return out


def save_matches(path, matches: MatchSet) -> None:
    lines = []
    for k in range(len(matches)):
        rec = {
            "vi": matches.view_i[k],
            "vj": matches.view_j[k],
            "pi": [float(x) for x in matches.p_i[k]],
            "pj": [float(x) for x in matches.p_j[k]],
            "conf": float(matches.confidence[k]),
        }
        if matches.gt_outlier is not None:
            rec["gt_outlier"] = bool(matches.gt_outlier[k])
        lines.append(json.dumps(rec))
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_matches(path, cameras: list[Camera] | None = None) -> MatchSet:
    """Parse a match file, validating view ids and dropping out-of-image pixels."""
    by_id = {c.id: c for c in cameras} if cameras is not None else None
    vi, vj, pi, pj, conf, labels = [], [], [], [], [], []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            a, b = str(rec["vi"]), str(rec["vj"])
            p, q = [float(x) for x in rec["pi"]], [float(x) for x in rec["pj"]]
            c = float(rec.get("conf", 1.0))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if len(p) != 2 or len(q) != 2:
            raise ParseError(f"{path}:{lineno}: pixel coordinates must have two entries")
        if a == b:
            raise ParseError(f"{path}:{lineno}: match connects a view to itself")
        if by_id is not None:
            for v in (a, b):
                if v not in by_id:
                    raise UnknownViewId(f"{path}:{lineno}: unknown view id {v!r}")
        vi.append(a)
        vj.append(b)
        pi.append(p)
        pj.append(q)
        conf.append(c)
        labels.append(rec.get("gt_outlier"))
    has_labels = bool(labels) and all(x is not None for x in labels)
    ms = MatchSet(vi, vj, pi, pj, conf, np.array(labels, dtype=bool) if has_labels else None)
    dropped = 0
    if by_id is not None and len(ms):
        ok = np.array(
            [by_id[ms.view_i[k]].in_bounds(ms.p_i[k]) and by_id[ms.view_j[k]].in_bounds(ms.p_j[k]) for k in range(len(ms))],
            dtype=bool,
        )
        dropped = int((~ok).sum())
        if dropped:
            log.warning("%s: dropped %d matches with out-of-image pixels", path, dropped)
            ms = ms.subset(np.flatnonzero(ok))
    ms = ms.deduplicated()
    ms.dropped += dropped
    return ms


def sample_bilinear(img: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a 2D map at pixel coordinates (N, 2).

    The half-pixel rim outside the outermost centers is linearly extrapolated
    from the edge cell rather than clamped, so affine maps are reproduced
    exactly everywhere inside the image.
    """
    H, W = img.shape[:2]
    u = np.clip(p[:, 0], -0.5, W - 0.5)
    v = np.clip(p[:, 1], -0.5, H - 0.5)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(W - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = u - u0
    fv = v - v0
    if img.ndim == 3:
        fu, fv = fu[:, None], fv[:, None]
    return (
        img[v0, u0] * (1 - fu) * (1 - fv)
        + img[v0, u1] * fu * (1 - fv)
        + img[v1, u0] * (1 - fu) * fv
        + img[v1, u1] * fu * fv
    )


def synth_matches(gt_depth_i: np.ndarray, cam_i: Camera, cam_j: Camera, count: int,
                  noise_px: float = 0.0, outlier_rate: float = 0.0, rng=None,
                  gt_depth_j: np.ndarray | None = None, max_attempts: int = 20) -> MatchSet:
    """Ground-truth correspondences from view i to view j.

    Pixel centers of view i with visible surface are lifted by their true
    depth and projected into view j; samples leaving the image or failing the
    1% depth-consistency test against ``gt_depth_j`` (occlusion) are dropped.
    Inliers get Gaussian noise of ``noise_px`` on p_j; an ``outlier_rate``
    fraction gets a uniformly random p_j at least 20 px from the true one.
    """
    rng = np.random.default_rng(rng)
    H, W = gt_depth_i.shape
    vs, us = np.nonzero(gt_depth_i > 0)
    out_i, out_j = [], []
    need = count
    for _ in range(max_attempts):
        if need <= 0 or len(us) == 0:
            break
        pick = rng.integers(0, len(us), size=2 * need + 16)
        pi = np.stack([us[pick], vs[pick]], axis=1).astype(np.float64)
        d = gt_depth_i[vs[pick], us[pick]]
        X = lift_pixels(cam_i, pi, d)
        pj, zj = project_points(cam_j, X)
        ok = (zj > 0) & cam_j.in_bounds(pj)
        if gt_depth_j is not None:
            dj = np.zeros(len(pj))
            dj[ok] = sample_bilinear(gt_depth_j, pj[ok])
            ok &= np.abs(dj - zj) <= 0.01 * np.abs(zj)
        pi, pj = pi[ok][:need], pj[ok][:need]
        out_i.append(pi)
        out_j.append(pj)
        need -= len(pi)
    pi = np.concatenate(out_i) if out_i else np.zeros((0, 2))
    pj = np.concatenate(out_j) if out_j else np.zeros((0, 2))
    n = len(pi)
    outlier = rng.random(n) < outlier_rate
    if noise_px > 0:
        pj = pj + rng.normal(scale=noise_px, size=pj.shape) * (~outlier)[:, None]
    for k in np.flatnonzero(outlier):
        while True:
            cand = np.array([rng.uniform(-0.5, cam_j.width - 0.5), rng.uniform(-0.5, cam_j.height - 0.5)])
            if np.linalg.norm(cand - pj[k]) >= OUTLIER_MIN_ERROR_PX:
                pj[k] = cand
                break
    # noise can push a few points just outside the image
    keep = cam_j.in_bounds(pj)
    pi, pj, outlier = pi[keep], pj[keep], outlier[keep]
    m = len(pi)
    return MatchSet([cam_i.id] * m, [cam_j.id] * m, pi, pj, np.ones(m), outlier)


def pair_active(model: HybridModel) -> np.ndarray:
    """A pair is active only while both of its primitives are."""
    pt = model.pair_table
    return model.active[pt[:, 0]] & model.active[pt[:, 1]]


def filter_pairs(model: HybridModel, per_pair_loss: np.ndarray, eta: float) -> np.ndarray:
    """Deactivate both primitives of every pair whose loss exceeds ``eta``.

    Deactivation is sticky and nothing is deleted; the model's mask is
    updated in place and returned.
    """
    loss = np.asarray(per_pair_loss, dtype=np.float64)
    bad = pair_active(model) & (loss > eta)
    pt = model.pair_table[bad]
    model.active[pt[:, 0]] = False
    model.active[pt[:, 1]] = False
    return model.active
