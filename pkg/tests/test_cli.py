import json

import pytest
import yaml

from unisumm import config as C
from unisumm.cli import main, sha256_file
from unisumm.errors import ConfigError

SMALL = {
    "model": {"d_model": 16, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1, "d_ff": 32,
              "prefix_len": 4, "max_src_len": 48, "max_tgt_len": 16},
    "optim": {"total_steps": 12, "batch_size": 4},
    "tune": {"steps": 4, "batch_size": 3},
    "bench": {"k_values": [3], "num_sets": 2, "steps": {3: 3}, "max_gen_len": 6},
    "run": {"log_level": "WARNING"},
}


def _last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.yaml").write_text(yaml.safe_dump(SMALL))
    assert main(["pretrain", "--config", str(root / "small.yaml"), "--out", str(root / "pt")]) == 0
    assert main(["make-synthetic", "--task", "wiki", "--out", str(root / "data")]) == 0
    return root


def _cfg(root):
    return str(root / "small.yaml")


class TestConfig:
    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("optim: {learning_rate: 0.5}\n")
        cfg = C.load_config(path, {"optim.learning_rate": "1e-3", "run.seed": 4})
        assert cfg["optim"]["learning_rate"] == 1e-3 and cfg["run"]["seed"] == 4

    def test_every_key_has_a_flag(self):
        from unisumm.cli import build_parser
        text = build_parser()._subparsers._group_actions[0].choices["bench"].format_help()
        for key in C.flat_keys():
            assert f"--{key}" in text

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("model: {depth: 3}\n")
        with pytest.raises(ConfigError, match="model.depth"):
            C.load_config(path)

    def test_yaml_scientific_notation(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("optim: {learning_rate: 1e-3}\n")
        assert C.load_config(path)["optim"]["learning_rate"] == 1e-3

    def test_bad_type(self):
        with pytest.raises(ConfigError):
            C.load_config(None, {"model.d_model": "wide"})

    def test_warmup_follows_total_steps(self):
        cfg = C.load_config(None, {"optim.total_steps": 200})
        assert C.optimizer_config(cfg).warmup_steps == 10


class TestCommands:
    def test_pretrain_outputs_and_manifest(self, workdir):
        pt = workdir / "pt"
        names = {p.name for p in pt.iterdir()}
        assert {"backbone.ckpt", "bank.ckpt", "train_state.ckpt", "train_log.jsonl",
                "manifest.json"} <= names
        manifest = json.loads((pt / "manifest.json").read_text())
        assert manifest["outputs"]["backbone.ckpt"] == sha256_file(pt / "backbone.ckpt")
        assert manifest["seeds"]["run.seed"] == 0
        assert str((workdir / "small.yaml").resolve()) in manifest["inputs"]
        log = [json.loads(line) for line in (pt / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in log] == list(range(12))

    def test_outputs_carry_no_timestamps(self, workdir, tmp_path):
        again = tmp_path / "pt2"
        assert main(["pretrain", "--config", _cfg(workdir), "--out", str(again)]) == 0
        for name in ("backbone.ckpt", "bank.ckpt", "train_log.jsonl", "train_state.ckpt"):
            assert sha256_file(again / name) == sha256_file(workdir / "pt" / name)

    def test_flag_equals_file_value(self, workdir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["pretrain", "--config", _cfg(workdir), "--out", str(a),
                     "--optim.total_steps", "5"]) == 0
        cfg = dict(SMALL, optim={"total_steps": 5, "batch_size": 4})
        (tmp_path / "five.yaml").write_text(yaml.safe_dump(cfg))
        assert main(["pretrain", "--config", str(tmp_path / "five.yaml"), "--out", str(b)]) == 0
        assert sha256_file(a / "backbone.ckpt") == sha256_file(b / "backbone.ckpt")

    def test_resume_matches_uninterrupted(self, workdir, tmp_path):
        half = tmp_path / "half"
        assert main(["pretrain", "--config", _cfg(workdir), "--out", str(half),
                     "--stop-at", "6"]) == 0
        rest = tmp_path / "rest"
        assert main(["pretrain", "--config", _cfg(workdir), "--out", str(rest), "--resume",
                     str(half / "train_state.ckpt")]) == 0
        assert sha256_file(rest / "backbone.ckpt") == sha256_file(workdir / "pt" / "backbone.ckpt")
        assert sha256_file(rest / "bank.ckpt") == sha256_file(workdir / "pt" / "bank.ckpt")

    def test_tune_generate_score(self, workdir, tmp_path, capsys):
        shots_dir = tmp_path / "shots"
        assert main(["sample-shots", "--config", _cfg(workdir), "--task", "wiki", "--k", "3",
                     "--out", str(shots_dir)]) == 0
        shots = shots_dir / "shots_wiki_k3_set0.jsonl"
        assert len(shots.read_text().splitlines()) == 3
        capsys.readouterr()
        assert main(["tune", "--config", _cfg(workdir), "--backbone",
                     str(workdir / "pt/backbone.ckpt"), "--bank", str(workdir / "pt/bank.ckpt"),
                     "--shots", str(shots), "--task", "wiki", "--out", str(tmp_path / "t")]) == 0
        assert json.loads(capsys.readouterr().out)["backbone_frozen"] is True
        assert main(["generate", "--config", _cfg(workdir), "--backbone",
                     str(workdir / "pt/backbone.ckpt"), "--prefix", str(tmp_path / "t/prefix.ckpt"),
                     "--input", str(workdir / "data/test.jsonl"), "--out", str(tmp_path / "g")]) == 0
        preds = tmp_path / "g/predictions.jsonl"
        assert len(preds.read_text().splitlines()) == 40
        assert main(["score", "--refs", str(workdir / "data/test.jsonl"), "--preds", str(preds),
                     "--out", str(tmp_path / "s")]) == 0
        scores = json.loads((tmp_path / "s/scores.json").read_text())
        assert scores["n"] == 40 and 0 <= scores["mean"]["rouge1"]["f1"] <= 1

    def test_bench_and_replay(self, workdir, tmp_path, capsys):
        out = tmp_path / "bench"
        assert main(["bench", "--config", _cfg(workdir), "--backbone",
                     str(workdir / "pt/backbone.ckpt"), "--bank", str(workdir / "pt/bank.ckpt"),
                     "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert len(report["cells"]) == 2 * 2 * 3
        capsys.readouterr()
        assert main(["replay", str(out / "manifest.json")]) == 0
        assert json.loads(capsys.readouterr().out.splitlines()[-1])["identical"] is True

    def test_replay_detects_changed_output(self, workdir, tmp_path, capsys):
        manifest = json.loads((workdir / "pt/manifest.json").read_text())
        manifest["outputs"]["bank.ckpt"] = "0" * 64
        path = tmp_path / "m.json"
        path.write_text(json.dumps(manifest))
        assert main(["replay", str(path)]) == 2
        assert json.loads(capsys.readouterr().out.splitlines()[-1])["mismatches"] == ["bank.ckpt"]


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert main(["pretrain", "--out", "x", "--model.depth", "3"]) == 1
        assert _last_error(capsys)["exit_code"] == 1

    def test_missing_subcommand(self):
        assert main([]) == 1

    def test_invalid_config_value(self, tmp_path, capsys):
        assert main(["pretrain", "--out", str(tmp_path), "--model.d_model", "6"]) == 1
        assert "divisible" in _last_error(capsys)["message"]

    def test_malformed_jsonl(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"id": "a", "document": "x y", "summary": "x"}\n{not json\n')
        assert main(["generate", "--backbone", str(workdir / "pt/backbone.ckpt"), "--input",
                     str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "bad.jsonl:2" in _last_error(capsys)["message"]

    def test_corrupt_checkpoint(self, workdir, tmp_path):
        broken = tmp_path / "bb.ckpt"
        broken.write_bytes((workdir / "pt/backbone.ckpt").read_bytes()[:-10])
        assert main(["generate", "--backbone", str(broken), "--input",
                     str(workdir / "data/test.jsonl"), "--out", str(tmp_path / "o")]) == 2

    def test_bank_for_other_backbone(self, workdir, tmp_path, capsys):
        other = tmp_path / "other"
        assert main(["pretrain", "--config", _cfg(workdir), "--out", str(other),
                     "--run.seed", "1"]) == 0
        assert main(["bench", "--config", _cfg(workdir), "--backbone",
                     str(workdir / "pt/backbone.ckpt"), "--bank", str(other / "bank.ckpt"),
                     "--out", str(tmp_path / "b")]) == 2
        assert _last_error(capsys)["error"] == "HashMismatchError"

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_abort(self, workdir, tmp_path, capsys):
        code = main(["pretrain", "--config", _cfg(workdir), "--out", str(tmp_path),
                     "--optim.learning_rate", "1e300", "--optim.kind", "plain-sgd"])
        assert code == 3
        err = _last_error(capsys)
        assert err["error"] == "NumericalError" and "step" in err["diagnostics"]

    def test_unknown_task(self, workdir, tmp_path):
        assert main(["sample-shots", "--config", _cfg(workdir), "--task", "nope", "--k", "3",
                     "--out", str(tmp_path)]) == 1

    def test_universal_init_without_bank(self, workdir, tmp_path):
        shots = workdir / "data/train.jsonl"
        lines = shots.read_text().splitlines()[:3]
        (tmp_path / "s.jsonl").write_text("\n".join(lines) + "\n")
        assert main(["tune", "--config", _cfg(workdir), "--backbone",
                     str(workdir / "pt/backbone.ckpt"), "--shots", str(tmp_path / "s.jsonl"),
                     "--out", str(tmp_path / "o")]) == 1
