import hashlib
import json

import numpy as np
import pytest
import torch
from PIL import Image

from invreg.cli import main
from invreg.sampler import read_patch_csv
from invreg.trainer import load_checkpoint, parameter_hash
from invreg.volio import read_landmarks, read_volume

torch.set_num_threads(1)

SYNTH_48 = [
    "--dims", "48", "--blobs", "300", "--sigma", "1.0,2.0",
    "--amplitude", "2", "--smoothness", "16", "--seed", "5",
]
TRAIN_FAST = [
    "--batch-size", "2", "--patch-size", "16", "--base-channels", "8",
    "--no-adversarial", "--seed", "0",
]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(path):
    data = json.loads(path.read_text())
    data.pop("created_unix")
    return data


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train 200 iterations -> register, shared by several tests."""
    root = tmp_path_factory.mktemp("pipeline")
    pair = root / "pair"
    assert main(["synth", "--out", str(pair)] + SYNTH_48) == 0
    ckpt = root / "model.pt"
    assert main([
        "train", "--volumes", str(pair / "source.ivl"), str(pair / "target.ivl"),
        "--checkpoint", str(ckpt), "--iterations", "200",
        "--log", str(root / "train_log.jsonl"),
    ] + TRAIN_FAST) == 0
    reg = root / "reg"
    assert main([
        "register", "--source", str(pair / "source.ivl"),
        "--target", str(pair / "target.ivl"),
        "--checkpoint", str(ckpt), "--out", str(reg), "--overlap", "8",
    ]) == 0
    return {"root": root, "pair": pair, "ckpt": ckpt, "reg": reg}


@pytest.fixture(scope="module")
def small_pair(tmp_path_factory):
    out = tmp_path_factory.mktemp("small") / "pair16"
    assert main(["synth", "--out", str(out), "--dims", "16", "--blobs", "60",
                 "--smoothness", "6", "--seed", "3"]) == 0
    return out


def test_synth_writes_contracted_artifacts(pipeline):
    names = sorted(p.name for p in pipeline["pair"].iterdir())
    assert names == [
        "landmarks.csv", "landmarks_source.csv", "manifest.json",
        "source.ivl", "target.ivl", "truth.ivf",
    ]
    manifest = json.loads((pipeline["pair"] / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["parameters"]["dims"] == [48, 48, 48]
    assert manifest["parameters"]["seed"] == 5
    assert "created_unix" in manifest


def test_pipeline_smoke_improves_cc(pipeline):
    metrics = json.loads((pipeline["reg"] / "metrics.json").read_text())
    assert metrics["cc_before"] < metrics["cc_after"]
    assert metrics["cc_before"] < metrics["cc_after_bwd"]


def test_register_outputs(pipeline):
    names = sorted(p.name for p in pipeline["reg"].iterdir())
    assert names == [
        "flow_st.ivf", "flow_ts.ivf", "manifest.json", "metrics.json",
        "warped_source.ivl", "warped_target.ivl",
    ]
    metrics = json.loads((pipeline["reg"] / "metrics.json").read_text())
    assert set(metrics) == {
        "cc_before", "cc_after", "cc_after_bwd",
        "mi_before", "mi_after", "mi_after_bwd",
    }


def test_train_log_and_manifest(pipeline):
    records = [
        json.loads(line)
        for line in (pipeline["root"] / "train_log.jsonl").read_text().splitlines()
    ]
    assert len(records) == 200
    assert all(np.isfinite(r["total"]) for r in records)
    manifest = _manifest(pipeline["ckpt"].with_suffix(".manifest.json"))
    assert len(manifest["parameters"]["generator_hash"]) > 16


def test_synth_reproducible_byte_for_byte(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["synth", "--out", str(out), "--dims", "16", "--seed", "11",
                     "--blobs", "40"]) == 0
    for name in ("source.ivl", "target.ivl", "truth.ivf",
                 "landmarks.csv", "landmarks_source.csv"):
        assert _sha(a / name) == _sha(b / name), name
    assert _manifest(a / "manifest.json") == _manifest(b / "manifest.json")


def test_seed_env_fallback_and_override(tmp_path, monkeypatch):
    monkeypatch.setenv("INVREG_SEED", "9")
    out = tmp_path / "env"
    assert main(["synth", "--out", str(out), "--dims", "16", "--blobs", "5"]) == 0
    assert json.loads((out / "manifest.json").read_text())["parameters"]["seed"] == 9
    out2 = tmp_path / "flag"
    assert main(["synth", "--out", str(out2), "--dims", "16", "--blobs", "5",
                 "--seed", "3"]) == 0
    assert json.loads((out2 / "manifest.json").read_text())["parameters"]["seed"] == 3
    monkeypatch.setenv("INVREG_SEED", "nope")
    assert main(["synth", "--out", str(tmp_path / "c"), "--dims", "16"]) == 1


def test_usage_errors(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--bogus-flag", "1"]) == 1
    assert "--bogus-flag" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["synth", "--out", str(tmp_path), "--dims", "1,2"]) == 1
    assert "1,2" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path), "--dims", "16",
                 "--sigma", "1,2,3"]) == 1


def test_sample_writes_csv_and_archive(pipeline, tmp_path):
    csv = tmp_path / "windows.csv"
    archive = tmp_path / "patches.ivp"
    assert main([
        "sample", "--source", str(pipeline["pair"] / "source.ivl"),
        "--target", str(pipeline["pair"] / "target.ivl"),
        "--count", "25", "--patch-size", "16", "--seed", "2",
        "--out", str(csv), "--archive", str(archive),
    ]) == 0
    assert len(read_patch_csv(csv)) == 25
    assert archive.exists()
    manifest = _manifest(csv.with_suffix(".manifest.json"))
    assert manifest["parameters"]["count"] == 25


def test_sample_blank_volume_is_data_error(tmp_path, capsys):
    blank = tmp_path / "blank"
    assert main(["synth", "--out", str(blank), "--dims", "24", "--blobs", "0",
                 "--seed", "0"]) == 0
    rc = main([
        "sample", "--source", str(blank / "source.ivl"),
        "--target", str(blank / "target.ivl"),
        "--count", "5", "--patch-size", "16", "--out", str(tmp_path / "w.csv"),
    ])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_train_reproducible_hash(pipeline, tmp_path):
    vols = [str(pipeline["pair"] / "source.ivl"), str(pipeline["pair"] / "target.ivl")]
    hashes = []
    for name in ("r1.pt", "r2.pt"):
        ck = tmp_path / name
        assert main(["train", "--volumes", *vols, "--checkpoint", str(ck),
                     "--iterations", "4"] + TRAIN_FAST) == 0
        hashes.append(parameter_hash(load_checkpoint(ck).generator))
    assert hashes[0] == hashes[1]


def test_train_resume_matches_straight_run(pipeline, tmp_path):
    vols = [str(pipeline["pair"] / "source.ivl"), str(pipeline["pair"] / "target.ivl")]
    straight = tmp_path / "straight.pt"
    assert main(["train", "--volumes", *vols, "--checkpoint", str(straight),
                 "--iterations", "6"] + TRAIN_FAST) == 0
    part = tmp_path / "part.pt"
    assert main(["train", "--volumes", *vols, "--checkpoint", str(part),
                 "--iterations", "3"] + TRAIN_FAST) == 0
    assert main(["train", "--volumes", *vols, "--checkpoint", str(part),
                 "--resume", str(part), "--iterations", "6"] + TRAIN_FAST) == 0
    assert load_checkpoint(part).step == 6
    assert parameter_hash(load_checkpoint(part).generator) == parameter_hash(
        load_checkpoint(straight).generator
    )


def test_train_divergence_exit_code(pipeline, tmp_path, capsys):
    rc = main([
        "train", "--volumes", str(pipeline["pair"] / "source.ivl"),
        str(pipeline["pair"] / "target.ivl"),
        "--checkpoint", str(tmp_path / "bad.pt"), "--iterations", "4",
        "--lr-generator", "inf",
    ] + TRAIN_FAST)
    assert rc == 3
    assert "error" in capsys.readouterr().err


def test_register_dims_mismatch_names_both(pipeline, small_pair, capsys):
    rc = main([
        "register", "--source", str(pipeline["pair"] / "source.ivl"),
        "--target", str(small_pair / "target.ivl"),
        "--checkpoint", str(pipeline["ckpt"]), "--out", str(pipeline["root"] / "x"),
    ])
    assert rc == 2
    err = capsys.readouterr().err
    assert "(48, 48, 48)" in err and "(16, 16, 16)" in err


def test_register_missing_checkpoint(pipeline, tmp_path):
    rc = main([
        "register", "--source", str(pipeline["pair"] / "source.ivl"),
        "--target", str(pipeline["pair"] / "target.ivl"),
        "--checkpoint", str(tmp_path / "absent.pt"), "--out", str(tmp_path / "o"),
    ])
    assert rc == 2


def test_register_deterministic_and_leaves_inputs_alone(pipeline, tmp_path):
    src = pipeline["pair"] / "source.ivl"
    tgt = pipeline["pair"] / "target.ivl"
    before = (_sha(src), _sha(tgt), _sha(pipeline["ckpt"]))
    outs = []
    try:
        for name in ("d1", "d2"):
            out = tmp_path / name
            assert main([
                "register", "--source", str(src), "--target", str(tgt),
                "--checkpoint", str(pipeline["ckpt"]), "--out", str(out),
                "--overlap", "8", "--deterministic",
            ]) == 0
            outs.append(out)
    finally:
        torch.use_deterministic_algorithms(False)
    for name in ("flow_st.ivf", "flow_ts.ivf", "warped_source.ivl",
                 "warped_target.ivl", "metrics.json"):
        assert _sha(outs[0] / name) == _sha(outs[1] / name), name
    assert _manifest(outs[0] / "manifest.json") == _manifest(outs[1] / "manifest.json")
    assert (_sha(src), _sha(tgt), _sha(pipeline["ckpt"])) == before


def test_evaluate_stdout_json(pipeline, capsys):
    src = str(pipeline["pair"] / "source.ivl")
    assert main(["evaluate", "--a", src, "--b", src]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["cc"] == pytest.approx(1.0)
    assert report["mi"] > 0


def test_evaluate_with_landmarks_and_field(pipeline, tmp_path):
    pair = pipeline["pair"]
    out = tmp_path / "report.json"
    csv = tmp_path / "report.csv"
    assert main([
        "evaluate", "--a", str(pair / "target.ivl"), "--b", str(pair / "source.ivl"),
        "--fixed-landmarks", str(pair / "landmarks.csv"),
        "--moving-landmarks", str(pair / "landmarks_source.csv"),
        "--field", str(pair / "truth.ivf"),
        "--out", str(out), "--csv", str(csv),
    ]) == 0
    report = json.loads(out.read_text())
    assert report["landmarks_field"]["mean_mm"] < report["landmarks_identity"]["mean_mm"]
    lines = csv.read_text().splitlines()
    assert lines[0] == "metric,value"
    assert any(line.startswith("landmarks_field.avg,") for line in lines)


def test_evaluate_landmarks_need_both_flags(pipeline):
    pair = pipeline["pair"]
    rc = main([
        "evaluate", "--a", str(pair / "source.ivl"), "--b", str(pair / "target.ivl"),
        "--fixed-landmarks", str(pair / "landmarks.csv"),
    ])
    assert rc == 1


def test_evaluate_dims_mismatch(pipeline, small_pair):
    rc = main([
        "evaluate", "--a", str(pipeline["pair"] / "source.ivl"),
        "--b", str(small_pair / "source.ivl"),
    ])
    assert rc == 2


def test_landmarks_transport_recovers_targets(pipeline, tmp_path):
    pair = pipeline["pair"]
    out = tmp_path / "moved.csv"
    assert main([
        "landmarks", "--landmarks", str(pair / "landmarks_source.csv"),
        "--field", str(pair / "truth.ivf"), "--out", str(out),
    ]) == 0
    moved = read_landmarks(out)
    reference = read_landmarks(pair / "landmarks.csv")
    assert moved.names == reference.names
    assert np.allclose(moved.coords, reference.coords, atol=1e-3)


def test_diffimg_outputs(small_pair, tmp_path):
    src = str(small_pair / "source.ivl")
    diff = tmp_path / "d.png"
    overlay = tmp_path / "o.png"
    assert main(["diffimg", "--a", src, "--b", src,
                 "--diff", str(diff), "--overlay", str(overlay)]) == 0
    img = np.asarray(Image.open(diff))
    assert img.shape == (16, 16)
    assert (img == 255).all()  # identical inputs
    rgb = np.asarray(Image.open(overlay))
    assert rgb.shape == (16, 16, 3)
    assert np.array_equal(rgb[..., 0], rgb[..., 1])
    assert (rgb[..., 2] == 0).all()


def test_diffimg_requires_an_output(small_pair):
    src = str(small_pair / "source.ivl")
    assert main(["diffimg", "--a", src, "--b", src]) == 1


def test_corrupt_volume_is_data_error(tmp_path):
    bad = tmp_path / "bad.ivl"
    bad.write_bytes(b"XXXX" + b"\0" * 60)
    assert main(["evaluate", "--a", str(bad), "--b", str(bad)]) == 2
