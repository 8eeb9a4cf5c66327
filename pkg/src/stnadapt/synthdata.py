"""Synthetic ultrasound-like corpus: tongue-arc images driven by a smooth
8-dimensional latent state, a fixed nonlinear latent-to-spectrum map, and a
planted per-session affine misalignment.

Speaker anatomy varies geometrically (arc position/curvature, mostly
compensable by an affine transform) plus mildly in appearance (brightness,
speckle) and in a small speaker-specific component of the spectral map, so
cross-session adaptation has an easier job than cross-speaker adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import containers
from .autodiff import ShapeError, Tensor
from .stn import IDENTITY_THETA, bilinear_sample, compose_theta, make_affine_grid

LATENT_DIM = 8
SPEC_DIM = 80
_MAP_HIDDEN = 32
_SPEAKER_MAP_WEIGHT = 0.15


@dataclass(frozen=True)
class SpeakerProfile:
    """Anatomy and rendering parameters, fixed by (corpus seed, speaker id)."""

    speaker_id: int
    arc_v_center: float
    arc_curvature: float
    arc_thickness: float
    brightness: float
    bright_gradient: float
    speckle: float
    map_seed: tuple[int, ...]


@dataclass
class Dataset:
    """Paired samples with split labels and normalization bookkeeping."""

    images: np.ndarray          # [N,1,H,W] or [N,1,T,H,W], float32 in [-1,1]
    spectra: np.ndarray         # [N,D] float32
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    standardized: bool = False
    target_mean: np.ndarray | None = None
    target_std: np.ndarray | None = None

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.images[idx], self.spectra[idx]


def make_profile(corpus_seed: int, speaker_id: int) -> SpeakerProfile:
    rng = np.random.default_rng([corpus_seed, speaker_id, 11])
    return SpeakerProfile(
        speaker_id=speaker_id,
        arc_v_center=float(rng.uniform(0.40, 0.58)),
        arc_curvature=float(rng.uniform(0.9, 1.5)),
        arc_thickness=float(rng.uniform(0.032, 0.048)),
        brightness=float(rng.uniform(0.85, 1.15)),
        bright_gradient=float(rng.uniform(-0.15, 0.15)),
        speckle=float(rng.uniform(0.05, 0.10)),
        map_seed=(corpus_seed, speaker_id, 23),
    )


# -- latent trajectory ---------------------------------------------------


def sample_latent_trajectory(seed, length: int, dim: int = LATENT_DIM) -> np.ndarray:
    """Smooth bounded latent path: unit-variance AR(1) noise, clipped.

    The smoothing coefficient gives lag-1 autocorrelation about 0.95, so
    25-frame blocks see a slowly varying articulatory state.
    """
    if dim != LATENT_DIM:
        raise ValueError(f"latent dim is fixed at {LATENT_DIM}, got {dim}")
    if length < 1:
        raise ValueError(f"length must be positive, got {length}")
    a = 0.95
    rng = np.random.default_rng(seed)
    burn = 200
    noise = rng.standard_normal((burn + length, dim)) * np.sqrt(1.0 - a * a)
    z = np.zeros(dim)
    out = np.empty((burn + length, dim))
    for t in range(burn + length):
        z = a * z + noise[t]
        out[t] = z
    return np.clip(out[burn:], -3.0, 3.0)


# -- rendering -----------------------------------------------------------


def render_frames(
    z: np.ndarray,
    profile: SpeakerProfile,
    noise_seed,
    height: int = 64,
    width: int = 128,
) -> np.ndarray:
    """Render latent states [N,8] to min-max normalized frames [N,1,H,W]."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != LATENT_DIM:
        raise ShapeError(f"latent states must be [N,{LATENT_DIM}], got {z.shape}")
    n = z.shape[0]
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu = u[None, None, :]
    vv = v[None, :, None]
    t = np.tanh(z)[:, None, None, :]

    vc = profile.arc_v_center + 0.06 * t[..., 0]
    curv = profile.arc_curvature * (1.0 + 0.25 * t[..., 1])
    tilt = 0.15 * t[..., 2]
    thick = profile.arc_thickness * (1.0 + 0.30 * t[..., 3])
    amp = profile.brightness * (1.0 + 0.20 * t[..., 4])
    uc = 0.5 + 0.08 * t[..., 7]

    du = uu - uc
    v_arc = vc + curv * du * du + tilt * du
    img = amp * np.exp(-((vv - v_arc) ** 2) / (2.0 * thick**2))

    # Secondary bright blob: an extra anatomy landmark off the main arc.
    v2 = vc - 0.20 + 0.05 * t[..., 5]
    amp2 = 0.35 * profile.brightness * (1.0 + 0.5 * t[..., 6])
    blob = amp2 * np.exp(
        -(((vv - v2) ** 2) + 0.25 * (uu - 0.35) ** 2) / (2.0 * 0.05**2)
    )
    img = img + blob

    img = img + 0.03 + profile.bright_gradient * 0.1 * vv

    rng = np.random.default_rng(noise_seed)
    img = img * (1.0 + profile.speckle * rng.standard_normal((n, height, width)))
    return minmax_normalize(img)[:, None].astype(np.float32)


def render_frame(z, profile, noise_seed, height=64, width=128) -> np.ndarray:
    """Single-frame convenience wrapper; returns [1,H,W]."""
    return render_frames(np.asarray(z)[None], profile, noise_seed,
                         height, width)[0]


def minmax_normalize(frames: np.ndarray) -> np.ndarray:
    """Per-frame min-max normalization onto exactly [-1, 1]."""
    flat = frames.reshape(frames.shape[0], -1)
    lo = flat.min(axis=1)[:, None]
    hi = flat.max(axis=1)[:, None]
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    out = (flat - lo) / span * 2.0 - 1.0
    return out.reshape(frames.shape)


# -- spectral map --------------------------------------------------------


def _map_weights(seed, scale_in: int, hidden: int, out: int):
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((scale_in, hidden)) / np.sqrt(scale_in)
    b1 = 0.3 * rng.standard_normal(hidden)
    w2 = rng.standard_normal((hidden, out)) / np.sqrt(hidden)
    b2 = 0.1 * rng.standard_normal(out)
    return w1, b1, w2, b2


def spectrum_map(z: np.ndarray, profile: SpeakerProfile,
                 corpus_seed: int | None = None) -> np.ndarray:
    """Latent states [N,8] (or [8]) to spectra [N,80] (or [80]).

    A map shared across the corpus plus a small speaker-specific component,
    both fixed two-layer tanh expansions.
    """
    single = np.asarray(z).ndim == 1
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    shared_seed = (profile.map_seed[0], 37)
    w1, b1, w2, b2 = _map_weights(shared_seed, LATENT_DIM, _MAP_HIDDEN, SPEC_DIM)
    y = np.tanh(z @ w1 + b1) @ w2 + b2
    v1, c1, v2, c2 = _map_weights(profile.map_seed, LATENT_DIM, _MAP_HIDDEN,
                                  SPEC_DIM)
    y = y + _SPEAKER_MAP_WEIGHT * (np.tanh(z @ v1 + c1) @ v2 + c2)
    return y[0] if single else y


# -- session transforms --------------------------------------------------


def sample_session_theta(rng: np.random.Generator, limits: dict) -> np.ndarray:
    """Random planted transform: rotation * scale * shear plus translation."""
    ang = np.deg2rad(rng.uniform(-limits["max_rotation_deg"],
                                 limits["max_rotation_deg"]))
    sx = rng.uniform(limits["scale_low"], limits["scale_high"])
    sy = rng.uniform(limits["scale_low"], limits["scale_high"])
    sh = rng.uniform(-limits["max_shear"], limits["max_shear"])
    tx = rng.uniform(-limits["max_translation"], limits["max_translation"])
    ty = rng.uniform(-limits["max_translation"], limits["max_translation"])
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    lin = rot @ np.array([[sx, sh * sx], [0.0, sy]])
    return np.array([lin[0, 0], lin[0, 1], tx, lin[1, 0], lin[1, 1], ty])


def apply_session_transform(frames: np.ndarray, theta: np.ndarray,
                            chunk: int = 256) -> np.ndarray:
    """Warp frames by theta via the affine grid + bilinear sampler.

    frames: [N,1,H,W] (or a single [1,H,W]); theta: [6] shared or [N,6]
    per frame.
    """
    single = np.asarray(frames).ndim == 3
    frames = np.asarray(frames)[None] if single else np.asarray(frames)
    n, _, h, w = frames.shape
    theta = np.asarray(theta, dtype=np.float64)
    thetas = np.broadcast_to(theta, (n, 6)) if theta.ndim == 1 else theta
    out = np.empty_like(frames)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        grid = make_affine_grid(Tensor(thetas[lo:hi]), h, w)
        out[lo:hi] = bilinear_sample(Tensor(frames[lo:hi]), grid).data
    return out[0] if single else out


# -- corpus generation ---------------------------------------------------


def session_list(cfg: dict) -> list[tuple[str, int, int, int]]:
    """Planned sessions as (session_id, speaker, session_index, n_frames)."""
    plan = []
    for spk in range(1, cfg["speakers"] + 1):
        plan.append((f"spk{spk}_ses1", spk, 1, cfg["base_frames"]))
    for ses in range(2, cfg["extra_sessions"] + 2):
        plan.append((f"spk1_ses{ses}", 1, ses, cfg["extra_frames"]))
    return plan


def generate_session(cfg: dict, seed: int, speaker: int, session: int,
                     n_frames: int) -> tuple[Dataset, np.ndarray]:
    """One session's dataset plus its planted session transform."""
    profile = make_profile(seed, speaker)
    rng_key = [seed, speaker, session]
    z = sample_latent_trajectory(rng_key + [1], n_frames)
    frames = render_frames(z, profile, rng_key + [2],
                           cfg["image_height"], cfg["image_width"])
    spectra = spectrum_map(z, profile).astype(np.float32)

    if session == 1:
        theta_star = IDENTITY_THETA.copy()
    else:
        theta_star = sample_session_theta(
            np.random.default_rng(rng_key + [3]), cfg
        )
    jitter = cfg["frame_jitter"] * np.random.default_rng(
        rng_key + [4]
    ).standard_normal((n_frames, 2))
    thetas = np.broadcast_to(theta_star, (n_frames, 6)).copy()
    thetas[:, 2] += jitter[:, 0]
    thetas[:, 5] += jitter[:, 1]

    warped = apply_session_transform(frames.astype(np.float64), thetas)
    images = minmax_normalize(warped[:, 0])[:, None].astype(np.float32)
    ds = Dataset(images=images, spectra=spectra,
                 splits=containers.split_indices(n_frames))
    return ds, theta_star


def generate_corpus(cfg: dict, seed: int, out_dir) -> dict[str, np.ndarray]:
    """Write all session files plus the ground-truth transform manifest.

    Returns the session-id -> planted-theta mapping.  The manifest sidecar
    is for evaluation reporting only; training code never reads it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, np.ndarray] = {}
    for session_id, spk, ses, n_frames in session_list(cfg):
        ds, theta_star = generate_session(cfg, seed, spk, ses, n_frames)
        containers.write_dataset(out_dir / f"{session_id}.utis",
                                 ds.images, ds.spectra)
        manifest[session_id] = theta_star
    lines = [
        f"{sid} " + " ".join(f"{v:.9g}" for v in theta)
        for sid, theta in manifest.items()
    ]
    (out_dir / "theta_star.txt").write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> dict[str, np.ndarray]:
    manifest = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        manifest[parts[0]] = np.array([float(v) for v in parts[1:]])
    return manifest


def load_session(path) -> Dataset:
    """Read a session container and attach the deterministic split."""
    images, spectra = containers.read_dataset(path)
    # Single-frame sessions come back as [N,1,H,W], which doubles as the
    # [N,C,H,W] layout the 2-d model consumes.
    return Dataset(images=images, spectra=spectra,
                   splits=containers.split_indices(images.shape[0]))


# -- preprocessing for training ------------------------------------------


def standardize_targets(dataset: Dataset,
                        stats: tuple[np.ndarray, np.ndarray] | None = None
                        ) -> Dataset:
    """Per-dimension (x - mean) / max(std, 1e-8) of the spectra.

    Without ``stats`` the statistics come from the dataset's own training
    split; a second standardization attempt is rejected.
    """
    if dataset.standardized:
        raise ValueError("dataset targets are already standardized")
    if stats is None:
        train = dataset.spectra[dataset.splits["train"]].astype(np.float64)
        mean = train.mean(axis=0)
        std = train.std(axis=0)
    else:
        mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    safe = np.maximum(std, 1e-8)
    spectra = ((dataset.spectra.astype(np.float64) - mean) / safe)
    return Dataset(
        images=dataset.images,
        spectra=spectra.astype(np.float32),
        splits=dataset.splits,
        standardized=True,
        target_mean=mean,
        target_std=std,
    )


def downscale_images(images: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool frames by an integer factor along both spatial axes."""
    if factor == 1:
        return images
    h, w = images.shape[-2], images.shape[-1]
    if h % factor or w % factor:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by {factor}")
    shape = images.shape[:-2] + (h // factor, factor, w // factor, factor)
    return images.reshape(shape).mean(axis=(-3, -1)).astype(images.dtype)


def make_blocks(dataset: Dataset, block: int = 25, stride: int = 5) -> Dataset:
    """Sliding 25-frame windows; the target is the central frame's spectrum."""
    frames = dataset.images[:, 0]  # [N,H,W]
    n = frames.shape[0]
    if n < block:
        raise ShapeError(f"session too short for {block}-frame blocks: {n}")
    starts = np.arange(0, n - block + 1, stride)
    idx = starts[:, None] + np.arange(block)[None, :]
    images = frames[idx][:, None]  # [M,1,T,H,W]
    spectra = dataset.spectra[starts + block // 2]
    return Dataset(
        images=np.ascontiguousarray(images),
        spectra=spectra,
        splits=containers.split_indices(len(starts)),
        standardized=dataset.standardized,
        target_mean=dataset.target_mean,
        target_std=dataset.target_std,
    )
