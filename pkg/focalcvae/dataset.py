"""Expert demonstration files (``FCVD``) and training-batch sampling.

Layout, little-endian: magic ``FCVD``, u32 version, u32 n_episodes,
u32 length, u32 img_h, u32 img_w, u32 proprio_dim, u32 action_dim,
u8 degradation code, u64 seed; then per episode and step the rgb, depth,
proprio and action blocks as f32.
"""

import logging
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Union

import numpy as np

from focalcvae import env
from focalcvae.errors import DatasetFormatError, UsageError
from focalcvae.rng import Rng

logger = logging.getLogger(__name__)

MAGIC = b"FCVD"
VERSION = 1
HEADER = struct.Struct("<4sIIIIIIIBQ")


def record_dtype(height: int, width: int, proprio_dim: int = env.PROPRIO_DIM, action_dim: int = env.ACTION_DIM):
    return np.dtype(
        [
            ("rgb", "<f4", (3, height, width)),
            ("depth", "<f4", (1, height, width)),
            ("proprio", "<f4", (proprio_dim,)),
            ("action", "<f4", (action_dim,)),
        ]
    )


@dataclass
class EpisodeDataset:
    records: np.ndarray
    n_episodes: int
    length: int
    degradation: str
    seed: int

    def __len__(self) -> int:
        return self.n_episodes * self.length

    def episode(self, i: int) -> np.ndarray:
        return self.records[i * self.length : (i + 1) * self.length]

    def chunk(self, episode: int, t: int, k: int) -> np.ndarray:
        """Actions ``t .. t+k-1`` of an episode, padded with its last action."""
        actions = self.episode(episode)["action"]
        idx = np.minimum(np.arange(t, t + k), self.length - 1)
        return actions[idx]

    @cached_property
    def settled(self) -> np.ndarray:
        """Per episode, the first step from which every action equals the final one."""
        actions = self.records["action"].reshape(self.n_episodes, self.length, -1)
        differs = np.any(actions != actions[:, -1:], axis=-1)
        last = np.where(differs.any(axis=1), self.length - 1 - np.argmax(differs[:, ::-1], axis=1), -1)
        return last + 1

    def start_limits(self, k: int) -> np.ndarray:
        """Exclusive upper bound on chunk start steps: the active part plus one chunk of idling."""
        return np.minimum(self.settled + k, self.length)


def record_episode(state: env.WorldState, length: int) -> List[env.Frame]:
    """Run the expert for ``length`` steps, recording the frame before each action."""
    frames = []
    for _ in range(length):
        frame = env.observe(state)
        frame.action = env.scripted_expert(state).astype(np.float32)
        frames.append(frame)
        state = env.step(state, frame.action)
    return frames


def generate_dataset(
    path: Union[str, Path], n_episodes: int, length: int, degradation: str, seed: int
) -> EpisodeDataset:
    if n_episodes < 1 or length < 1:
        raise UsageError(f"need at least one episode and one step, got {n_episodes}x{length}")
    env.check_degradation(degradation)
    size = env.IMAGE_SIZE
    records = np.zeros(n_episodes * length, dtype=record_dtype(size, size))
    root = Rng(seed)
    for i in range(n_episodes):
        frames = record_episode(env.reset(root.fork(i), degradation), length)
        block = records[i * length : (i + 1) * length]
        for j, frame in enumerate(frames):
            block[j] = (frame.rgb, frame.depth, frame.proprio, frame.action)
        logger.debug("episode %d recorded", i)
    header = HEADER.pack(
        MAGIC, VERSION, n_episodes, length, size, size, env.PROPRIO_DIM, env.ACTION_DIM,
        env.DEGRADATION_CODES[degradation], seed & 0xFFFFFFFFFFFFFFFF,
    )
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(records.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc.strerror or exc}") from exc
    logger.info("wrote %d episodes x %d steps (%s) to %s", n_episodes, length, degradation, path)
    return EpisodeDataset(records, n_episodes, length, degradation, seed)


def read_dataset(path: Union[str, Path]) -> EpisodeDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc.strerror or exc}") from exc
    if len(raw) < HEADER.size:
        raise DatasetFormatError(path, "file shorter than the header")
    magic, version, n, length, h, w, p_dim, a_dim, code, seed = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(path, f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(path, f"unsupported version {version}")
    if code >= len(env.DEGRADATIONS):
        raise DatasetFormatError(path, f"unknown degradation code {code}")
    dtype = record_dtype(h, w, p_dim, a_dim)
    expected = HEADER.size + n * length * dtype.itemsize
    if len(raw) != expected:
        raise DatasetFormatError(path, f"expected {expected} bytes, found {len(raw)}")
    records = np.frombuffer(raw, dtype=dtype, count=n * length, offset=HEADER.size)
    return EpisodeDataset(records, n, length, env.DEGRADATIONS[code], seed)


@dataclass
class TrainingSample:
    rgb: np.ndarray
    depth: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray


def sample_batch(data: EpisodeDataset, rng: Rng, batch_size: int, k: int) -> List[TrainingSample]:
    """Random ``(frame, chunk)`` pairs; starts past ``start_limits(k)`` are never drawn."""
    episodes = rng.integers(0, data.n_episodes, batch_size)
    steps = rng.integers(0, data.start_limits(k)[episodes], batch_size)
    batch = []
    for e, t in zip(episodes, steps):
        rec = data.episode(int(e))[int(t)]
        batch.append(TrainingSample(rec["rgb"], rec["depth"], rec["proprio"], data.chunk(int(e), int(t), k)))
    return batch
