import hashlib
import json
from pathlib import Path

import pytest

from cadenza.cli import MANIFEST_NAME, main
from cadenza.dataio import read_embeddings
from cadenza.nn import read_checkpoint

SPEC = {"n_videos": 40, "segments_per_video": 3, "latent_dim": 4, "audio_dim": 12, "video_dim": 8,
        "cross_modal_correlation": 0.9, "noise_sigma": 0.05, "n_genres": 3, "n_tags": 12, "seed": 2}
TRAIN = {"hidden": 8, "embed": 4, "batch_size": 8, "lr0": 0.5, "max_epochs": 4}


def _digests(out: Path) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.iterdir()) if p.name != MANIFEST_NAME}


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = _write_json(root / "spec.json", SPEC)
    assert main(["synth", str(spec), "--out", str(root / "data")]) == 0
    cfg = _write_json(root / "train.json", TRAIN)
    assert main(["train", "--data", str(root / "data"), "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root


def test_synth_counts(tmp_path):
    spec = _write_json(tmp_path / "s.json", {"n_videos": 100, "segments_per_video": 6, "audio_dim": 5, "video_dim": 3})
    assert main(["synth", str(spec), "--out", str(tmp_path / "d")]) == 0
    assert read_embeddings(tmp_path / "d" / "audio.mveb").count == 600
    assert read_embeddings(tmp_path / "d" / "video.mveb").count == 600
    assert len((tmp_path / "d" / "manifest.jsonl").read_text().splitlines()) == 600
    manifest = json.loads((tmp_path / "d" / MANIFEST_NAME).read_text())
    assert manifest["command"] == "synth" and manifest["inputs"]


def test_synth_reproducible(tmp_path, workspace):
    spec = workspace / "spec.json"
    assert main(["synth", str(spec), "--out", str(tmp_path / "again")]) == 0
    assert _digests(tmp_path / "again") == _digests(workspace / "data")


def test_synth_rho_out_of_range(tmp_path, capsys):
    spec = _write_json(tmp_path / "bad.json", {**SPEC, "cross_modal_correlation": 1.5})
    assert main(["synth", str(spec), "--out", str(tmp_path / "x")]) == 2
    assert "cross_modal_correlation" in capsys.readouterr().err


def test_train_outputs(workspace):
    run = workspace / "run"
    sections, meta = read_checkpoint(run / "checkpoint.mvck")
    assert sections["audio"].dims == [12, 8, 4]
    assert meta["variant"] == "base"
    header = (run / "history.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,lr"
    manifest = json.loads((run / MANIFEST_NAME).read_text())
    assert set(manifest["outputs"]) >= {str(run / "checkpoint.mvck"), str(run / "history.csv")}
    assert manifest["argv"][0] == "train"


def test_train_reproducible(tmp_path, workspace):
    args = ["train", "--data", str(workspace / "data"), "--config", str(workspace / "train.json")]
    assert main(args + ["--out", str(tmp_path / "r")]) == 0
    assert _digests(tmp_path / "r") == _digests(workspace / "run")


def _dry(capsys, args):
    assert main(args + ["--dry-run"]) == 0
    return json.loads(capsys.readouterr().out)


@pytest.mark.parametrize("variant,check", [
    ("base", {"hidden": 512, "embed": 256, "n_layers": 2, "temperature": 1.0}),
    ("embed512", {"embed": 512}),
    ("four-layers", {"n_layers": 4}),
    ("single-head", {"head_mode": "single_video_to_audio"}),
    ("tau03", {"temperature": 0.3}),
    ("ae-init", {"init": "autoencoder"}),
])
def test_variant_mapping(capsys, workspace, variant, check):
    resolved = _dry(capsys, ["train", "--data", str(workspace / "data"), "--variant", variant])
    for key, value in check.items():
        assert resolved[key] == value


def test_negative_set_flag(capsys, workspace, tmp_path):
    resolved = _dry(capsys, ["train", "--data", str(workspace / "data"), "--negative-set", "paper-literal"])
    assert resolved["negative_set"] == "paper_literal"
    assert not (tmp_path / MANIFEST_NAME).exists()


def test_eval_retrieval(workspace, tmp_path):
    out = tmp_path / "e"
    assert main(["eval-retrieval", "--data", str(workspace / "data"), "--checkpoint",
                 str(workspace / "run" / "checkpoint.mvck"), "--out", str(out)]) == 0
    report = json.loads((out / "retrieval_eval.json").read_text())
    assert report["pool_size"] == report["a->v"]["pool_size"] > 0
    text = (out / "retrieval_eval.txt").read_text()
    assert "tie rule" in text and "v->a" in text


def test_eval_retrieval_dim_mismatch(workspace, tmp_path):
    spec = _write_json(tmp_path / "s.json", {**SPEC, "audio_dim": 7})
    main(["synth", str(spec), "--out", str(tmp_path / "d")])
    rc = main(["eval-retrieval", "--data", str(tmp_path / "d"), "--checkpoint",
               str(workspace / "run" / "checkpoint.mvck"), "--out", str(tmp_path / "e")])
    assert rc == 2


@pytest.mark.parametrize("source,dim", [("backbone-concat", 20), ("contrastive-agg", 8), ("backbone-audio", 12)])
def test_probe_sources(workspace, tmp_path, source, dim):
    cfg = _write_json(tmp_path / "p.json", {"hidden": [8, 4], "batch_size": 16, "max_epochs": 3, "top_k": 5})
    out = tmp_path / "p"
    args = ["probe", "--data", str(workspace / "data"), "--source", source, "--task", "tags",
            "--config", str(cfg), "--out", str(out)]
    if source.startswith("contrastive"):
        args += ["--checkpoint", str(workspace / "run" / "checkpoint.mvck")]
    assert main(args) == 0
    report = json.loads((out / "probe_metrics.json").read_text())
    assert report["feature_dim"] == dim
    assert 0.0 <= report["macro_auc"] <= 1.0


def test_probe_genre_and_missing_checkpoint(workspace, tmp_path):
    cfg = _write_json(tmp_path / "p.json", {"hidden": [8, 4], "batch_size": 16, "max_epochs": 3})
    base = ["probe", "--data", str(workspace / "data"), "--task", "genre", "--config", str(cfg)]
    assert main(base + ["--source", "backbone-video", "--out", str(tmp_path / "g")]) == 0
    assert "accuracy" in json.loads((tmp_path / "g" / "probe_metrics.json").read_text())
    assert main(base + ["--source", "contrastive-audio", "--out", str(tmp_path / "h")]) == 2


def test_retrieve_defaults(workspace, tmp_path):
    ckpt = str(workspace / "run" / "checkpoint.mvck")
    for level, n in (("track", 25), ("segment", 20)):
        out = tmp_path / level
        assert main(["retrieve", "--data", str(workspace / "data"), "--checkpoint", ckpt,
                     "--level", level, "--out", str(out)]) == 0
        report = json.loads((out / "retrieval.json").read_text())
        assert len(report["results"]) == n
        assert all(len(r["neighbors"]) == 3 for r in report["results"])
        again = tmp_path / (level + "2")
        main(["retrieve", "--data", str(workspace / "data"), "--checkpoint", ckpt, "--level", level,
              "--out", str(again)])
        assert _digests(out) == _digests(again)


def test_retrieve_seed_file(workspace, tmp_path):
    seeds = tmp_path / "seeds.txt"
    seeds.write_text("v000001\nv000003\n")
    out = tmp_path / "r"
    assert main(["retrieve", "--data", str(workspace / "data"), "--seeds", str(seeds), "--k", "2",
                 "--out", str(out)]) == 0
    report = json.loads((out / "retrieval.json").read_text())
    assert [r["seed"][0] for r in report["results"]] == ["v000001", "v000003"]
    seeds.write_text("nope\n")
    assert main(["retrieve", "--data", str(workspace / "data"), "--seeds", str(seeds), "--out", str(out)]) == 2


def test_analyze(workspace, tmp_path):
    out = tmp_path / "a"
    assert main(["analyze", "--data", str(workspace / "data"), "--grouping", "same_song",
                 "--bootstrap", "200", "--out", str(out)]) == 0
    report = json.loads((out / "analysis.json").read_text())
    assert report["gap"] > 0
    assert {"mean_within", "mean_between", "ci_low", "ci_high"} <= set(report)


def test_missing_dataset_is_usage_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path)]) == 2


def test_bad_seed_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["synth", "x.json", "--seed", str(2**64)])
