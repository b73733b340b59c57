import numpy as np
import pytest

from gaitset.cli import main
from gaitset.evaluate import EmbeddingStore, read_results
from gaitset.network import GaitSetModel
from gaitset.pipeline import ABLATION_ARMS, resolve_network
from gaitset.tensor import Tensor

LEAN = ["--network", "small", "--set", "channels=2,2,4,4,8,8", "--set", "embed_dim=4", "--set", "scales=2"]
QUICK = ["--iterations", "3", "--p", "2", "--k", "2", "--m", "4"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root), "--identities", "5", "--views", "3", "--frames", "6"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data), "--out", str(out), "--seed", "7", *LEAN, *QUICK]) == 0
    return out


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "model.ckpt").is_file()
        log = (trained / "train.log").read_text().splitlines()
        assert len(log) == 3 and log[0].startswith("iteration=1 loss=")
        run = read_results(trained / "run.txt")
        assert run["run.protocol"] == "SYNTH" and run["run.train.seed"] == "7"
        assert run["run.network.channels"] == "2,2,4,4,8,8"

    def test_same_seed_same_checkpoint(self, data, trained, tmp_path):
        assert main(["train", "--data", str(data), "--out", str(tmp_path), "--seed", "7", *LEAN, *QUICK]) == 0
        assert (tmp_path / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()

    def test_checkpoint_every(self, data, tmp_path):
        args = ["train", "--data", str(data), "--out", str(tmp_path), *LEAN, *QUICK, "--checkpoint-every", "2"]
        assert main(args) == 0
        assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["checkpoint-0000002.ckpt"]


class TestEmbedEval:
    def test_pipeline(self, data, trained, tmp_path):
        ckpt = str(trained / "model.ckpt")
        assert main(["embed", "--checkpoint", ckpt, "--data", str(data), "--out", str(tmp_path)]) == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["gallery.store", "probe-BG.store", "probe-CL.store", "probe-NM.store"]
        assert main(["eval", "--stores", str(tmp_path)]) == 0
        values = read_results(tmp_path / "results.kv")
        assert values["run.protocol"] == "SYNTH" and "result.NM.mean" in values
        assert (tmp_path / "results.txt").read_text().startswith("Probe")

    def test_embedding_is_deterministic(self, data, trained, tmp_path):
        ckpt = str(trained / "model.ckpt")
        for d in ("a", "b"):
            assert main(["embed", "--checkpoint", ckpt, "--data", str(data), "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "a" / "gallery.store").read_bytes() == (tmp_path / "b" / "gallery.store").read_bytes()

    def test_identity_construction_prints_100(self, tmp_path, capsys):
        def store(offset, view):
            emb = np.array([[[0.0]], [[1000.0]]], np.float32) + offset
            entries = [{"identity": i, "views": [view], "conditions": ["NM"], "sources": [f"{i}/{view}"], "frames": 1} for i in "ab"]
            return EmbeddingStore(emb, entries)

        store(0.0, "000").save(tmp_path / "g.store")
        store(0.5, "090").save(tmp_path / "p.store")
        code = main(["eval", "--gallery", str(tmp_path / "g.store"), "--probe", f"NM={tmp_path / 'p.store'}", "--out", str(tmp_path)])
        assert code == 0
        assert capsys.readouterr().out.splitlines()[2].split() == ["NM", "100.0", "100.0"]


class TestSweep:
    def test_frames(self, data, trained, tmp_path, capsys):
        args = ["sweep", "--mode", "frames", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data),
                "--budgets", "1,3", "--seeds", "2", "--out", str(tmp_path)]
        assert main(args) == 0
        values = read_results(tmp_path / "sweep-frames.kv")
        assert set(values) >= {"sweep.frames.1", "sweep.frames.3", "run.mode"}

    def test_untrained_is_warned(self, data, tmp_path, caplog):
        args = ["sweep", "--mode", "multiview", *LEAN, "--data", str(data), "--seeds", "1", "--per-view", "2", "--out", str(tmp_path)]
        assert main(args) == 0
        assert "untrained" in caplog.text


class TestAblate:
    def test_list_has_nine_arms(self, capsys):
        assert main(["ablate", "--list"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == len(ABLATION_ARMS) == 9
        assert "gei_collapse=True" in lines[0] and "mgp_enabled=True" in lines[8]

    def test_gei_arm_changes_only_the_input(self):
        base = resolve_network("small")
        gei, set_arm = (ABLATION_ARMS[i].network(base) for i in (0, 1))
        assert not set_arm.gei_collapse and gei.gei_collapse
        a, b = (GaitSetModel.initialize(c) for c in (gei, set_arm))
        assert a.num_parameters() == b.num_parameters()

    def test_runs_selected_arms(self, data, tmp_path):
        args = ["ablate", "--arms", "1,2", "--data", str(data), "--out", str(tmp_path), *LEAN, *QUICK]
        assert main(args) == 0
        table = (tmp_path / "ablation.txt").read_text().splitlines()
        assert len(table) == 3 and "gei+shared-hpm" in table[1]
        assert (tmp_path / "arm-2" / "model.ckpt").is_file()


class TestErrors:
    def test_unknown_flag(self, capsys):
        assert main(["train", "--bogus"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert main([]) == 2

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 3

    def test_missing_store(self, tmp_path):
        assert main(["eval", "--stores", str(tmp_path)]) == 3

    def test_bad_network_override(self, data, tmp_path):
        assert main(["train", "--data", str(data), "--out", str(tmp_path), "--set", "depth=3"]) == 2

    def test_non_finite_checkpoint(self, data, trained, tmp_path):
        model = GaitSetModel.load(trained / "model.ckpt")
        name = next(iter(model.params))
        bad = model.params[name].data.copy()
        bad.flat[0] = np.nan
        model.params[name] = Tensor(bad)
        model.save(tmp_path / "bad.ckpt")
        assert main(["embed", "--checkpoint", str(tmp_path / "bad.ckpt"), "--data", str(data), "--out", str(tmp_path)]) == 4


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--instances", "1", "--no-graph"]) == 0
    assert "gradient checks passed" in capsys.readouterr().out
