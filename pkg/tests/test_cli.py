import pandas as pd
import pytest

from focalcvae.cli import main

TINY = """\
image_size=32
backbone_channels=2
model_dim=4
heads=2
blocks=1
ff_dim=8
z_dim=2
chunk=3
batch_size=1
steps=1
log_every=1
bench_length=20
bench_head_dim=2
bench_u=3
bench_image_size=16
bench_warmup=0
bench_iters=1
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def read(path):
    frame = pd.read_csv(path)
    assert frame.columns[0] == "config_hash"
    assert frame["config_hash"].nunique() == 1
    return frame


class TestExitCodes:
    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as info:
            main(["fly"])
        assert info.value.code == 2

    def test_model_eval_needs_checkpoint(self):
        assert main(["eval", "--policy", "model"]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["bench", "--config", str(tmp_path / "absent.cfg")]) == 1

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "absent.fcvd")]) == 1

    def test_bad_degradation(self, tmp_path):
        assert main(["gen", "--degradation", "fog", "--out", str(tmp_path / "x.fcvd")]) == 1


class TestCommands:
    def test_gen_train_eval_dump(self, tmp_path, tiny_cfg):
        data = tmp_path / "demo.fcvd"
        assert main(["gen", "--config", tiny_cfg, "--episodes", "1", "--length", "4", "--out", str(data)]) == 0
        assert data.is_file()

        run = tmp_path / "run"
        assert main(["train", "--config", tiny_cfg, "--data", str(data), "--out", str(run)]) == 0
        assert (run / "policy.fcvp").is_file()
        loss = read(run / "loss.csv")
        assert list(loss.columns) == ["config_hash", "step", "reconst", "reg", "total"]
        assert len(loss) == 1

        checkpoint = str(run / "policy.fcvp")
        table = tmp_path / "eval.csv"
        args = ["eval", "--config", tiny_cfg, "--checkpoint", checkpoint, "--rollouts", "1", "--length", "3"]
        assert main(args + ["--degradation", "none,color-match", "--out", str(table)]) == 0
        frame = read(table)
        assert list(frame["degradation"]) == ["none", "color-match"]
        assert {"touched_pct", "lifted_pct", "transferred_pct"} <= set(frame.columns)

        shares = tmp_path / "attention.csv"
        args = ["attn-dump", "--config", tiny_cfg, "--checkpoint", checkpoint, "--length", "3"]
        assert main(args + ["--out", str(shares)]) == 0
        dump = read(shares)
        assert list(dump["t"]) == [0, 1, 2]
        assert ((dump["rgb_share"] + dump["depth_share"]).round(6) == 1.0).all()

    def test_reruns_are_byte_identical(self, tmp_path, tiny_cfg):
        outputs = []
        for name in ("a", "b"):
            data, run = tmp_path / f"{name}.fcvd", tmp_path / name
            assert main(["gen", "--config", tiny_cfg, "--episodes", "1", "--length", "3", "--out", str(data)]) == 0
            assert main(["train", "--config", tiny_cfg, "--data", str(data), "--out", str(run), "--steps", "2"]) == 0
            outputs.append([data.read_bytes(), (run / "policy.fcvp").read_bytes(), (run / "loss.csv").read_bytes()])
        assert outputs[0] == outputs[1]

    def test_modality_mismatch_is_rejected(self, tmp_path, tiny_cfg):
        data = tmp_path / "demo.fcvd"
        main(["gen", "--config", tiny_cfg, "--episodes", "1", "--length", "2", "--out", str(data)])
        main(["train", "--config", tiny_cfg, "--data", str(data), "--out", str(tmp_path / "run")])
        args = ["eval", "--checkpoint", str(tmp_path / "run" / "policy.fcvp"), "--modality", "rgb"]
        assert main(args + ["--rollouts", "1", "--length", "1", "--out", str(tmp_path / "e.csv")]) == 1

    def test_expert_eval(self, tmp_path):
        out = tmp_path / "eval.csv"
        assert main(["eval", "--policy", "expert", "--rollouts", "2", "--out", str(out)]) == 0
        frame = read(out)
        assert frame.loc[0, "policy"] == "expert"
        assert frame.loc[0, "transferred_pct"] == 100.0

    def test_bench(self, tmp_path, tiny_cfg):
        out = tmp_path / "bench"
        assert main(["bench", "--config", tiny_cfg, "--out", str(out)]) == 0
        flops = read(out / "flops.csv")
        assert set(flops["model"]) == {"focal-cvae", "dense-baseline", "saliency-attention", "dense-attention"}
        latency = read(out / "latency.csv")
        assert len(latency) == 4


def run_cli(*args):
    assert main([str(a) for a in args]) == 0


def trained_run(root, degradation, modality, seed):
    """gen + train at the default config; returns the checkpoint path."""
    data = root / f"{degradation}_{seed}.fcvd"
    if not data.is_file():
        run_cli("gen", "--degradation", degradation, "--seed", seed, "--out", data)
    run = root / f"{degradation}_{modality}_{seed}"
    run_cli("train", "--data", data, "--modality", modality, "--seed", seed, "--out", run)
    return run / "policy.fcvp"


def phase_table(root, checkpoint, degradation, modality, seed):
    out = root / f"eval_{checkpoint.parent.name}_{degradation}.csv"
    run_cli("eval", "--checkpoint", checkpoint, "--degradation", degradation, "--modality", modality,
            "--seed", seed + 100, "--rollouts", 50, "--out", out)
    return read(out).iloc[0]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@pytest.mark.slow
class TestExperiments:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_depth_rescues_colour_matched_cube(self, runs, seed):
        rgb = trained_run(runs, "color-match", "rgb", seed)
        rgbd = trained_run(runs, "color-match", "rgbd", seed)
        baseline = phase_table(runs, rgb, "color-match", "rgb", seed)
        ours = phase_table(runs, rgbd, "color-match", "rgbd", seed)
        assert baseline["touched_pct"] <= 10.0
        assert ours["touched_pct"] >= 70.0
        assert ours["transferred_pct"] >= 50.0

    def test_clean_scenes_transfer(self, runs):
        checkpoint = trained_run(runs, "none", "rgbd", 0)
        assert phase_table(runs, checkpoint, "none", "rgbd", 0)["transferred_pct"] >= 60.0

    def test_depth_share_rises_when_colour_fails(self, runs):
        checkpoint = runs / "color-match_rgbd_0" / "policy.fcvp"
        if not checkpoint.is_file():
            checkpoint = trained_run(runs, "color-match", "rgbd", 0)
        shares = {}
        for degradation in ("color-match", "none"):
            out = runs / f"attention_{degradation}.csv"
            run_cli("attn-dump", "--checkpoint", checkpoint, "--degradation", degradation,
                    "--episodes", 10, "--seed", 7, "--out", out)
            dump = read(out)
            assert ((dump["rgb_share"] + dump["depth_share"] - 1.0).abs() < 1e-6).all()
            grasp = dump[dump["phase"] == "grasp"]
            assert len(grasp) > 0, degradation
            shares[degradation] = grasp["depth_share"].mean()
        assert shares["color-match"] > shares["none"]
