import numpy as np
import pytest

from focalcvae import env
from focalcvae.dataset import (
    HEADER,
    EpisodeDataset,
    generate_dataset,
    read_dataset,
    record_dtype,
    record_episode,
    sample_batch,
)
from focalcvae.errors import ConfigurationError, DatasetFormatError, UsageError
from focalcvae.rng import Rng


@pytest.fixture
def demo(tmp_path):
    path = tmp_path / "demo.fcvd"
    return path, generate_dataset(path, 2, 5, "none", seed=7)


class TestGenerate:
    def test_same_seed_same_bytes(self, tmp_path):
        a, b = tmp_path / "a.fcvd", tmp_path / "b.fcvd"
        generate_dataset(a, 2, 4, "dim", seed=3)
        generate_dataset(b, 2, 4, "dim", seed=3)
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_different_bytes(self, tmp_path):
        a, b = tmp_path / "a.fcvd", tmp_path / "b.fcvd"
        generate_dataset(a, 1, 3, "none", seed=3)
        generate_dataset(b, 1, 3, "none", seed=4)
        assert a.read_bytes() != b.read_bytes()

    def test_file_size(self, demo):
        path, data = demo
        assert len(data) == 10
        assert path.stat().st_size == HEADER.size + 10 * data.records.dtype.itemsize

    def test_first_frame_is_reset_observation(self, demo):
        _, data = demo
        frame = env.observe(env.reset(Rng(7).fork(0), "none"))
        first = data.episode(0)[0]
        np.testing.assert_array_equal(first["rgb"], frame.rgb)
        np.testing.assert_array_equal(first["depth"], frame.depth)
        np.testing.assert_array_equal(first["proprio"], frame.proprio)

    def test_actions_come_from_the_expert(self):
        state = env.reset(Rng(2))
        frames = record_episode(state, 3)
        np.testing.assert_allclose(frames[0].action, env.scripted_expert(state), rtol=1e-6)
        np.testing.assert_allclose(frames[1].proprio[:6], env.step(state, frames[0].action).pose(), rtol=1e-6)

    def test_invalid_arguments(self, tmp_path):
        with pytest.raises(UsageError):
            generate_dataset(tmp_path / "x.fcvd", 0, 5, "none", seed=1)
        with pytest.raises(ConfigurationError):
            generate_dataset(tmp_path / "x.fcvd", 1, 5, "fog", seed=1)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError, match="cannot write dataset"):
            generate_dataset(tmp_path / "missing" / "x.fcvd", 1, 1, "none", seed=1)


class TestRead:
    def test_round_trip(self, demo):
        path, data = demo
        loaded = read_dataset(path)
        assert (loaded.n_episodes, loaded.length, loaded.degradation, loaded.seed) == (2, 5, "none", 7)
        assert loaded.records.tobytes() == data.records.tobytes()

    def test_bad_magic(self, demo):
        path, _ = demo
        raw = path.read_bytes()
        path.write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(DatasetFormatError, match="magic"):
            read_dataset(path)

    def test_truncated(self, demo):
        path, _ = demo
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(DatasetFormatError, match="expected"):
            read_dataset(path)

    def test_shorter_than_header(self, tmp_path):
        path = tmp_path / "tiny.fcvd"
        path.write_bytes(b"FCVD")
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_unknown_version(self, demo):
        path, _ = demo
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(DatasetFormatError, match="version"):
            read_dataset(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError, match="cannot read dataset"):
            read_dataset(tmp_path / "absent.fcvd")


class TestSampling:
    def test_chunk_pads_with_last_action(self, demo):
        _, data = demo
        actions = data.episode(1)["action"]
        chunk = data.chunk(1, 3, 4)
        np.testing.assert_array_equal(chunk[:2], actions[3:5])
        np.testing.assert_array_equal(chunk[2], actions[4])
        np.testing.assert_array_equal(chunk[3], actions[4])

    def test_batch_shapes_and_determinism(self, demo):
        _, data = demo
        first = sample_batch(data, Rng(1), 3, 4)
        second = sample_batch(data, Rng(1), 3, 4)
        assert len(first) == 3
        assert first[0].rgb.shape == (3, 32, 32)
        assert first[0].depth.shape == (1, 32, 32)
        assert first[0].actions.shape == (4, env.ACTION_DIM)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.actions, b.actions)


def tagged_dataset(action_rows):
    """Tiny in-memory dataset whose proprio holds ``(step, episode)``."""
    n, length = len(action_rows), len(action_rows[0])
    records = np.zeros(n * length, dtype=record_dtype(4, 4))
    for e, rows in enumerate(action_rows):
        for t, value in enumerate(rows):
            records["action"][e * length + t] = value
            records["proprio"][e * length + t, :2] = (t, e)
    return EpisodeDataset(records, n, length, "none", 0)


class TestActiveWindow:
    def test_settled_step(self):
        data = tagged_dataset([[1, 2, 3, 4, 4, 4], [5, 5, 5, 5, 5, 5], [1, 2, 3, 4, 5, 6]])
        np.testing.assert_array_equal(data.settled, [3, 0, 5])
        np.testing.assert_array_equal(data.start_limits(2), [5, 2, 6])

    def test_idle_tail_is_not_sampled(self):
        data = tagged_dataset([[1, 2, 3] + [9] * 17, [4] * 20])
        limits = data.start_limits(2)
        batch = sample_batch(data, Rng(3), 400, 2)
        seen = {(int(s.proprio[1]), int(s.proprio[0])) for s in batch}
        assert all(t < limits[e] for e, t in seen)
        assert seen == {(0, t) for t in range(5)} | {(1, t) for t in range(2)}

    def test_expert_episodes_settle_early(self, tmp_path):
        data = generate_dataset(tmp_path / "long.fcvd", 3, 60, "none", seed=5)
        assert (data.settled < 40).all()
