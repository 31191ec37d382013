"""Synthetic multimodal beam-selection scenes.

A UE moves in front of a base-station ULA.  Each episode drives three
modalities from the same trajectory:

* ``rf-power``  -- per-beam received power estimated over a short window,
* ``position``  -- noisy Cartesian UE position (a GPS stand-in),
* ``radar-cube`` -- complex FMCW cube (antenna x fast time x slow time),
  stored as real/imag channels stacked along the antenna axis.

The label is the best receive beam at the final step.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .params import substream

FORMAT_VERSION = 1
MODALITIES = ("rf-power", "position", "radar-cube")


@dataclass
class SceneConfig:
    n_tx: int = 4
    n_rx: int = 8
    n_beams: int = 16
    n_paths: int = 2
    noise_power: float = 1.0
    symbol_energy: float = 1.0
    power_window: int = 4
    seq_len: int = 5
    episodes: int = 2000
    dt: float = 0.1
    range_min: float = 8.0
    range_max: float = 30.0
    speed_min: float = 3.0
    speed_max: float = 12.0
    turn_rate_max: float = 0.6
    accel_std: float = 0.5
    sector: float = np.pi / 3
    height: float = 1.5
    position_noise: float = 0.5
    nlos_gain: float = 0.3
    radar_rx: int = 4
    radar_samples: int = 4
    radar_chirps: int = 3
    radar_range_max: float = 32.0
    radar_velocity_res: float = 2.0
    radar_noise: float = 0.1
    radar_clutter: int = 0
    # steps at which each modality is observed; None means every step
    mask_steps: dict = field(default_factory=lambda: {"position": [0, 1]})
    seed: int = 0

    def __post_init__(self):
        if self.n_beams < 2 or self.n_paths < 1 or self.seq_len < 1 or self.power_window < 1:
            raise ValueError("need n_beams >= 2, n_paths >= 1, seq_len >= 1, power_window >= 1")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.noise_power < 0 or self.symbol_energy <= 0:
            raise ValueError("symbol energy must be > 0 and noise power >= 0")
        for name, steps in self.mask_steps.items():
            if name not in MODALITIES:
                raise ValueError(f"mask_steps: unknown modality {name!r}")
            if steps is not None and any(not 0 <= s < self.seq_len for s in steps):
                raise ValueError(f"mask_steps[{name!r}] outside [0, {self.seq_len})")

    def modality_shape(self, name):
        return {
            "rf-power": (self.n_beams,),
            "position": (3,),
            "radar-cube": (2 * self.radar_rx, self.radar_samples, self.radar_chirps),
        }[name]

    def step_mask(self):
        m = np.ones((self.seq_len, len(MODALITIES)), dtype=bool)
        for j, name in enumerate(MODALITIES):
            steps = self.mask_steps.get(name)
            if steps is not None:
                m[:, j] = False
                m[list(steps), j] = True
        return m


# --- array model -----------------------------------------------------------

def steering_vector(angle, n, kind="rx"):
    """Half-wavelength ULA response with unit 2-norm (identical for tx and rx)."""
    if n < 1:
        raise ValueError("array needs at least one element")
    if kind not in ("tx", "rx"):
        raise ValueError(f"kind must be 'tx' or 'rx', got {kind!r}")
    k = np.arange(n)
    return np.exp(1j * np.pi * k * np.sin(angle)) / np.sqrt(n)


def codebook(n_beams, n_rx):
    """DFT beams: rows g_b steered at uniformly spaced spatial frequencies."""
    u = -1.0 + (2.0 * np.arange(n_beams) + 1.0) / n_beams
    return np.stack([steering_vector(np.arcsin(ui), n_rx) for ui in u])


def beam_angles(n_beams):
    return np.arcsin(-1.0 + (2.0 * np.arange(n_beams) + 1.0) / n_beams)


@dataclass
class ChannelRealization:
    gains: np.ndarray
    aoa: np.ndarray
    aod: np.ndarray
    n_rx: int
    n_tx: int

    @property
    def H(self):
        H = np.zeros((self.n_rx, self.n_tx), dtype=complex)
        for a, th, ph in zip(self.gains, self.aoa, self.aod):
            H += a * np.outer(steering_vector(th, self.n_rx), steering_vector(ph, self.n_tx).conj())
        return H


def _unit_check(v, what):
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValueError(f"{what} must have unit 2-norm (got {np.linalg.norm(v):.12g})")


def measure_power(H, f, combiners, rng=None, noise_power=0.0, symbol_energy=1.0, window=1):
    """Windowed per-beam received power estimate.

    ``H`` may be a ChannelRealization or a complex matrix; ``combiners`` has
    one unit-norm codeword per row.  The symbol is constant-modulus with
    energy ``symbol_energy``.
    """
    H = H.H if isinstance(H, ChannelRealization) else np.asarray(H)
    f = np.asarray(f)
    G = np.atleast_2d(combiners)
    _unit_check(f, "precoder")
    for b, g in enumerate(G):
        _unit_check(g, f"combiner {b}")
    s = np.sqrt(symbol_energy)
    signal = G.conj() @ (H @ f) * s
    if noise_power == 0.0:
        return np.abs(signal) ** 2
    if rng is None:
        raise ValueError("a random generator is needed when noise_power > 0")
    std = np.sqrt(noise_power / 2.0)
    v = std * (rng.standard_normal((window, H.shape[0])) + 1j * rng.standard_normal((window, H.shape[0])))
    z = signal[None, :] + v @ G.conj().T
    return np.mean(np.abs(z) ** 2, axis=0)


def best_beam(H, f, combiners):
    """Index of the strongest noiseless beam; ties go to the lowest index."""
    p = measure_power(H, f, combiners)
    return int(np.argmax(p))


def synth_radar_cube(targets, n_rx, samples, chirps, noise=0.0, rng=None):
    """Complex cube [n_rx, samples, chirps] from point targets.

    ``targets`` is a list of (gain, range_bin, doppler_bin, angle).
    """
    s = np.arange(samples)[:, None]
    c = np.arange(chirps)[None, :]
    cube = np.zeros((n_rx, samples, chirps), dtype=complex)
    for gain, r0, d0, angle in targets:
        if not (0 <= r0 < samples and 0 <= d0 < chirps):
            raise ValueError(f"target bin ({r0}, {d0}) outside [0,{samples}) x [0,{chirps})")
        tone = np.exp(2j * np.pi * (r0 * s / samples + d0 * c / chirps))
        cube += gain * steering_vector(angle, n_rx)[:, None, None] * tone[None]
    if noise > 0.0:
        if rng is None:
            raise ValueError("a random generator is needed when noise > 0")
        std = np.sqrt(noise / 2.0)
        cube += std * (rng.standard_normal(cube.shape) + 1j * rng.standard_normal(cube.shape))
    return cube


def stack_complex(cube):
    return np.concatenate([cube.real, cube.imag], axis=0)


def unstack_complex(arr):
    n = arr.shape[0] // 2
    return arr[:n] + 1j * arr[n:]


# --- trajectories and episodes --------------------------------------------

def trajectory(cfg, rng):
    """Constant-turn-rate motion with small speed perturbations.

    Returns positions [T, 2] (lateral x, boresight y) and velocities [T, 2].
    """
    T = cfg.seq_len
    r = rng.uniform(cfg.range_min, cfg.range_max)
    th = rng.uniform(-cfg.sector, cfg.sector)
    pos = np.array([r * np.sin(th), r * np.cos(th)])
    heading = rng.uniform(-np.pi, np.pi)
    speed = rng.uniform(cfg.speed_min, cfg.speed_max)
    omega = rng.uniform(-cfg.turn_rate_max, cfg.turn_rate_max)
    P = np.zeros((T, 2))
    V = np.zeros((T, 2))
    for t in range(T):
        vel = speed * np.array([np.cos(heading), np.sin(heading)])
        P[t] = pos
        V[t] = vel
        pos = pos + vel * cfg.dt
        heading = heading + omega * cfg.dt
        speed = max(0.5, speed + cfg.accel_std * cfg.dt * rng.standard_normal())
    return P, V


def _episode(cfg, e):
    rng = substream(cfg.seed, "scene", e)
    P, V = trajectory(cfg, rng)
    G = codebook(cfg.n_beams, cfg.n_rx)
    f = steering_vector(0.0, cfg.n_tx, "tx")
    T = cfg.seq_len
    nlos_aoa = rng.uniform(-np.pi / 2, np.pi / 2, cfg.n_paths - 1)
    nlos_aod = rng.uniform(-np.pi / 2, np.pi / 2, cfg.n_paths - 1)
    clutter = [(rng.integers(cfg.radar_samples), rng.uniform(-cfg.sector, cfg.sector))
               for _ in range(cfg.radar_clutter)]

    rf = np.zeros((T, cfg.n_beams))
    pos = np.zeros((T, 3))
    radar = np.zeros((T,) + cfg.modality_shape("radar-cube"))
    label = 0
    for t in range(T):
        x, y = P[t]
        rng_t = np.hypot(x, y)
        aoa = np.arctan2(x, y)
        phases = np.exp(2j * np.pi * rng.uniform(size=cfg.n_paths))
        gains = np.concatenate([[1.0], cfg.nlos_gain * np.ones(cfg.n_paths - 1)]) * phases
        ch = ChannelRealization(gains, np.concatenate([[aoa], nlos_aoa]),
                                np.concatenate([[0.0], nlos_aod]), cfg.n_rx, cfg.n_tx)
        H = ch.H
        rf[t] = measure_power(H, f, G, rng, cfg.noise_power, cfg.symbol_energy, cfg.power_window)
        pos[t] = np.array([x, y, cfg.height]) + cfg.position_noise * rng.standard_normal(3)

        radial_v = (x * V[t, 0] + y * V[t, 1]) / rng_t
        r_bin = int(min(cfg.radar_samples - 1, rng_t / cfg.radar_range_max * cfg.radar_samples))
        d_bin = int(np.round(radial_v / cfg.radar_velocity_res)) % cfg.radar_chirps
        targets = [(1.0, r_bin, d_bin, aoa)]
        targets += [(0.5, cb, 0, ca) for cb, ca in clutter]
        cube = synth_radar_cube(targets, cfg.radar_rx, cfg.radar_samples, cfg.radar_chirps,
                                cfg.radar_noise, rng)
        radar[t] = stack_complex(cube)
        if t == T - 1:
            label = best_beam(H, f, G)
    return rf, pos, radar, label


@dataclass
class EpisodeBatch:
    """Multimodal sequences x[name] with shape [E, T, ...], labels and masks."""

    modalities: dict
    labels: np.ndarray
    mask: np.ndarray
    names: tuple = MODALITIES
    n_beams: int = 16
    files_read: list = field(default_factory=list)
    shapes: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.modalities.items():
            self.shapes.setdefault(k, tuple(v.shape[2:]))

    @property
    def episodes(self):
        return int(self.mask.shape[0])

    @property
    def seq_len(self):
        return int(self.mask.shape[1])

    def index(self, name):
        return self.names.index(name)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return EpisodeBatch({k: v[idx] for k, v in self.modalities.items()}, self.labels[idx],
                            self.mask[idx], self.names, self.n_beams, list(self.files_read),
                            dict(self.shapes))

    def with_mask(self, mask):
        return EpisodeBatch(self.modalities, self.labels, np.asarray(mask, dtype=bool),
                            self.names, self.n_beams, list(self.files_read), dict(self.shapes))

    def only(self, name):
        """View holding a single modality's samples (masks and labels kept)."""
        return EpisodeBatch({name: self.modalities[name]}, self.labels, self.mask, self.names,
                            self.n_beams, list(self.files_read), dict(self.shapes))

    def drop(self, names):
        mask = self.mask.copy()
        for n in names:
            mask[:, :, self.index(n)] = False
        return self.with_mask(mask)


def _threads():
    try:
        return max(1, int(os.environ.get("VIBEAM_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def simulate(cfg):
    """Generate all episodes in memory (deterministic in cfg.seed)."""
    E, T = cfg.episodes, cfg.seq_len
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(lambda e: _episode(cfg, e), range(E)))
    mods = {
        "rf-power": np.zeros((E, T) + cfg.modality_shape("rf-power")),
        "position": np.zeros((E, T) + cfg.modality_shape("position")),
        "radar-cube": np.zeros((E, T) + cfg.modality_shape("radar-cube")),
    }
    labels = np.zeros(E, dtype=np.int64)
    for e, (rf, pos, radar, label) in enumerate(results):
        mods["rf-power"][e] = rf
        mods["position"][e] = pos
        mods["radar-cube"][e] = radar
        labels[e] = label
    mask = np.broadcast_to(cfg.step_mask(), (E, T, len(MODALITIES))).copy()
    for j, name in enumerate(MODALITIES):
        # unobserved entries carry no data
        mods[name][~mask[:, :, j]] = 0.0
    # the stored format is float32; keep in-memory values identical to a reload
    mods = {k: v.astype("<f4").astype(np.float64) for k, v in mods.items()}
    return EpisodeBatch(mods, labels, mask, MODALITIES, cfg.n_beams,
                        shapes={n: cfg.modality_shape(n) for n in MODALITIES})


def write_dataset(batch, out_dir, cfg):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        table = []
        for name in batch.names:
            fname = f"mod_{name}.bin"
            arr = batch.modalities[name].astype("<f4")
            (out / fname).write_bytes(arr.tobytes(order="C"))
            table.append({"name": name, "shape": list(arr.shape[2:]), "file": fname})
        (out / "labels.bin").write_bytes(batch.labels.astype("<u2").tobytes())
        (out / "mask.bin").write_bytes(batch.mask.astype(np.uint8).tobytes())
        manifest = {
            "format_version": FORMAT_VERSION,
            "E": batch.episodes,
            "T": cfg.seq_len,
            "B": cfg.n_beams,
            "modalities": table,
            "mask_file": "mask.bin",
            "label_file": "labels.bin",
            "seed": cfg.seed,
            "scene": _jsonable(asdict(cfg)),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    return out


def _jsonable(d):
    return json.loads(json.dumps(d, default=float))


def generate_dataset(cfg, out_dir=None):
    batch = simulate(cfg)
    if out_dir is not None:
        write_dataset(batch, out_dir, cfg)
    return batch


def read_manifest(path):
    return json.loads((Path(path) / "manifest.json").read_text())


def load_dataset(path, modalities=None):
    """Read a dataset directory; only the requested modality files are opened."""
    path = Path(path)
    man = read_manifest(path)
    if man.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {man.get('format_version')!r}")
    E, T = man["E"], man["T"]
    names = tuple(m["name"] for m in man["modalities"])
    wanted = names if modalities is None else tuple(modalities)
    for w in wanted:
        if w not in names:
            raise KeyError(f"unknown modality {w!r}; dataset has {list(names)}")
    read = []
    mods = {}
    for entry in man["modalities"]:
        if entry["name"] not in wanted:
            continue
        f = path / entry["file"]
        raw = np.frombuffer(f.read_bytes(), dtype="<f4")
        mods[entry["name"]] = raw.reshape((E, T) + tuple(entry["shape"])).astype(np.float64)
        read.append(entry["file"])
    labels = np.frombuffer((path / man["label_file"]).read_bytes(), dtype="<u2").astype(np.int64)
    mask = np.frombuffer((path / man["mask_file"]).read_bytes(), dtype=np.uint8)
    mask = mask.reshape(E, T, len(names)).astype(bool)
    shapes = {m["name"]: tuple(m["shape"]) for m in man["modalities"]}
    return EpisodeBatch(mods, labels, mask, names, man["B"], read, shapes)
