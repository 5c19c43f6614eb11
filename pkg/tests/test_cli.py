import json
from pathlib import Path

import numpy as np
import pytest

from inpaintad import app
from inpaintad.cli import main
from inpaintad.config import RunConfig, load_config, save_config
from inpaintad.errors import ConfigError, DataError
from inpaintad.prototypes import load_bank
from inpaintad.scoring import load_score_map


def synth_cfg(synth_root, out_dir, **kw) -> RunConfig:
    base = dict(
        data_root=str(synth_root),
        layout="synthetic",
        output_dir=str(out_dir),
        backend="oracle",
        k=2,
        seed=0,
        image_size=256,
        finetune={"epochs_denoiser": 1, "epochs_decoder": 1, "batch_size": 2, "seed": 0},
    )
    base.update(kw)
    return load_config(None, base)


def read_scores(scores_dir: Path) -> dict[str, dict]:
    out = {}
    for sidecar in scores_dir.glob("*.json"):
        if sidecar.name == "manifest.json":
            continue
        out[sidecar.stem] = json.loads(sidecar.read_text())
    return out


# --------------------------------------------------------------------------
# config plumbing
# --------------------------------------------------------------------------

def test_config_roundtrip_and_hash(tmp_path, synth_root):
    cfg = synth_cfg(synth_root, tmp_path)
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    again = load_config(path)
    assert again.digest == cfg.digest


def test_config_env_expansion(tmp_path, monkeypatch, synth_root):
    monkeypatch.setenv("SYNTH_ROOT", str(synth_root))
    cfg = load_config(None, {"data_root": "$SYNTH_ROOT", "layout": "synthetic",
                             "output_dir": str(tmp_path)})
    assert cfg.data_root == str(synth_root)


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("bogus_key: 1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_rejects_indivisible_size():
    with pytest.raises(ConfigError):
        load_config(None, {"image_size": 100, "scales": [8]})


def test_packaged_full_scale_config_loads(tmp_path, monkeypatch):
    from importlib import resources
    monkeypatch.setenv("MVTEC_ROOT", str(tmp_path))
    path = resources.files("inpaintad").joinpath("resources/full_scale.yaml")
    cfg = load_config(str(path))
    assert cfg.image_size == 512
    assert cfg.n_steps == 50
    assert cfg.alpha == 0.1
    assert cfg.sigma == 4.0
    assert cfg.scales == (1, 2, 4, 8)
    assert cfg.finetune.epochs_denoiser == 4000
    assert cfg.finetune.epochs_decoder == 200
    assert cfg.finetune.lr == pytest.approx(1e-4)
    assert cfg.finetune.batch_size == 8
    assert cfg.finetune.gamma_choices == (0.0, 0.2, 0.5)
    assert cfg.schedule_steps == 1000


# --------------------------------------------------------------------------
# finetune command
# --------------------------------------------------------------------------

def test_cmd_finetune_zero_shot_refused(tmp_path, synth_root):
    cfg = synth_cfg(synth_root, tmp_path, k=0, backend="mock")
    with pytest.raises(ConfigError, match="zero-shot requires no fine-tuning"):
        app.cmd_finetune(cfg)


def test_cmd_finetune_mock_writes_artifacts(tmp_path, synth_root):
    cfg = synth_cfg(synth_root, tmp_path, backend="mock")
    paths = app.cmd_finetune(cfg)
    ckpt = np.load(paths["denoiser"])
    assert str(ckpt["config_hash"]) == cfg.digest
    loss_lines = Path(paths["denoiser_loss"]).read_text().strip().splitlines()
    assert loss_lines[0] == f"# config_hash={cfg.digest}"
    assert loss_lines[1] == "epoch,loss"
    assert len(loss_lines) == 3   # hash comment + header + one epoch


def test_cmd_finetune_periodic_checkpoints(tmp_path, synth_root):
    cfg = synth_cfg(synth_root, tmp_path, backend="mock",
                    finetune={"epochs_denoiser": 4, "epochs_decoder": 0,
                              "batch_size": 2, "seed": 0, "checkpoint_every": 2})
    app.cmd_finetune(cfg)
    ckpts = sorted((Path(cfg.output_dir) / "checkpoints").glob("denoiser_epoch*.npz"))
    assert [p.name for p in ckpts] == ["denoiser_epoch000002.npz", "denoiser_epoch000004.npz"]


def test_cmd_finetune_rerun_identical_losses(tmp_path, synth_root):
    cfg_a = synth_cfg(synth_root, tmp_path / "a", backend="mock")
    cfg_b = synth_cfg(synth_root, tmp_path / "b", backend="mock")
    pa = app.cmd_finetune(cfg_a)
    pb = app.cmd_finetune(cfg_b)
    assert Path(pa["denoiser_loss"]).read_text() == Path(pb["denoiser_loss"]).read_text()
    assert Path(pa["decoder_loss"]).read_text() == Path(pb["decoder_loss"]).read_text()


# --------------------------------------------------------------------------
# prototypes command
# --------------------------------------------------------------------------

def test_cmd_build_prototypes(tmp_path, synth_root):
    cfg = synth_cfg(synth_root, tmp_path, backend="mock")
    paths = app.cmd_build_prototypes(cfg)
    bank = load_bank(paths["synthtex"])
    assert bank.category == "synthtex"
    # 2 shots x 4 rotations x (256/8 / ... ) feature positions
    assert bank.vectors.shape[0] == bank.source_count > 0


# --------------------------------------------------------------------------
# inference + evaluation end to end (oracle backend)
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle_run(tmp_path_factory, synth_root):
    out = tmp_path_factory.mktemp("run")
    cfg = synth_cfg(synth_root, out)
    scores_dir = app.cmd_infer(cfg)
    return cfg, scores_dir


def test_infer_scores_positive_iff_defective(oracle_run):
    _, scores_dir = oracle_run
    for stem, sidecar in read_scores(scores_dir).items():
        if sidecar["label"] == "anomalous":
            assert sidecar["image_score"] > 0, stem
        else:
            assert sidecar["image_score"] == 0.0, stem


def test_infer_writes_complete_artifact_set(oracle_run):
    cfg, scores_dir = oracle_run
    manifest = json.loads((scores_dir / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.digest
    assert len(manifest["items"]) == 16
    for entry in manifest["items"]:
        for suffix in (".smap", ".png", ".json"):
            assert (scores_dir / (entry["stem"] + suffix)).exists()
    smap = load_score_map(scores_dir / (manifest["items"][0]["stem"] + ".smap"))
    assert smap.values.shape == (256, 256) and smap.smoothed


def test_evaluate_oracle_run_near_perfect(oracle_run):
    cfg, scores_dir = oracle_run
    report = app.cmd_evaluate(cfg, scores_dir)
    row = report.per_category["synthtex"]
    assert row["image_auroc"] == 1.0
    assert row["pixel_auroc"] >= 0.95
    assert row["pixel_pro"] >= 0.8
    eval_dir = Path(cfg.output_dir) / "evaluation"
    assert (eval_dir / "report.json").exists()
    assert (eval_dir / "report.csv").exists()


def test_evaluate_rejects_missing_map(oracle_run, tmp_path):
    cfg, scores_dir = oracle_run
    import shutil
    broken = tmp_path / "scores"
    shutil.copytree(scores_dir, broken)
    victim = next(broken.glob("*.smap"))
    victim.unlink()
    with pytest.raises(DataError) as err:
        app.cmd_evaluate(cfg, broken)
    assert victim.name in str(err.value)


def test_evaluate_rejects_mixed_hashes(oracle_run, tmp_path):
    cfg, scores_dir = oracle_run
    import shutil
    mixed = tmp_path / "scores"
    shutil.copytree(scores_dir, mixed)
    victim = next(p for p in mixed.glob("*.json") if p.name != "manifest.json")
    payload = json.loads(victim.read_text())
    payload["config_hash"] = "deadbeefdeadbeef"
    victim.write_text(json.dumps(payload))
    with pytest.raises(DataError, match="mixed config hashes"):
        app.cmd_evaluate(cfg, mixed)


def test_alpha_zero_skips_prototype_stage(tmp_path, synth_root, monkeypatch):
    cfg = synth_cfg(synth_root, tmp_path, alpha=0.0, k=0)
    calls = []
    import inpaintad.app as app_mod
    original = app_mod.prototype_error_map
    monkeypatch.setattr(app_mod, "prototype_error_map",
                        lambda *a, **k: calls.append(1) or original(*a, **k))
    app.cmd_infer(cfg)
    assert calls == []


def test_zero_shot_infer_works(tmp_path, synth_root):
    cfg = synth_cfg(synth_root, tmp_path, k=0)
    assert cfg.effective_alpha == 0.0
    scores_dir = app.cmd_infer(cfg)
    scores = read_scores(scores_dir)
    assert len(scores) == 16


# --------------------------------------------------------------------------
# determinism and cache
# --------------------------------------------------------------------------

def _run_twice_and_compare(synth_root, base, **kw):
    outputs = []
    for name in ("one", "two"):
        cfg = synth_cfg(synth_root, base / name, **kw)
        scores_dir = app.cmd_infer(cfg)
        blob = {}
        for p in sorted(scores_dir.iterdir()):
            if p.suffix in (".smap", ".json", ".png"):
                blob[p.name] = p.read_bytes()
        outputs.append(blob)
    assert outputs[0].keys() == outputs[1].keys()
    for name in outputs[0]:
        assert outputs[0][name] == outputs[1][name], f"{name} differs between runs"


def test_infer_byte_identical_across_runs(tmp_path, synth_root):
    _run_twice_and_compare(synth_root, tmp_path)


def test_infer_mock_backend_byte_identical(tmp_path, synth_root):
    _run_twice_and_compare(synth_root, tmp_path, backend="mock", k=1,
                           scales=(1, 2), n_steps=4, image_size=64)


def test_cache_resume_byte_identical(tmp_path, synth_root):
    cache = tmp_path / "cache"
    cfg1 = synth_cfg(synth_root, tmp_path / "one", backend="mock", k=1,
                     scales=(1, 2), n_steps=4, image_size=64, cache_dir=str(cache))
    dir1 = app.cmd_infer(cfg1)
    blob1 = {p.name: p.read_bytes() for p in sorted(dir1.iterdir())}
    assert any(cache.iterdir())
    # simulate an interrupted rerun that resumes purely from cache
    cfg2 = synth_cfg(synth_root, tmp_path / "two", backend="mock", k=1,
                     scales=(1, 2), n_steps=4, image_size=64, cache_dir=str(cache))
    dir2 = app.cmd_infer(cfg2)
    blob2 = {p.name: p.read_bytes() for p in sorted(dir2.iterdir())}
    assert blob1 == blob2


def test_worker_pool_matches_sequential(tmp_path, synth_root):
    cfg1 = synth_cfg(synth_root, tmp_path / "seq", k=0, workers=1)
    cfg4 = synth_cfg(synth_root, tmp_path / "par", k=0, workers=4)
    d1 = app.cmd_infer(cfg1)
    d4 = app.cmd_infer(cfg4)
    for p1 in sorted(d1.glob("*.smap")):
        p4 = d4 / p1.name
        assert p1.read_bytes() == p4.read_bytes()


# --------------------------------------------------------------------------
# CLI surface
# --------------------------------------------------------------------------

def test_cli_synth_and_infer_and_evaluate(tmp_path, capsys):
    root = tmp_path / "data"
    out = tmp_path / "out"
    assert main(["synth-data", "--data-root", str(root), "--layout", "synthetic",
                 "--out", str(out)]) == 0
    assert main(["infer", "--data-root", str(root), "--layout", "synthetic",
                 "--out", str(out), "--backend", "oracle", "--k", "1",
                 "--image-size", "256"]) == 0
    assert main(["evaluate", "--data-root", str(root), "--layout", "synthetic",
                 "--out", str(out), "--backend", "oracle", "--k", "1",
                 "--image-size", "256"]) == 0
    assert "image_auroc" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, synth_root):
    # config error: zero-shot finetune
    assert main(["finetune", "--data-root", str(synth_root), "--layout", "synthetic",
                 "--out", str(tmp_path), "--k", "0", "--backend", "mock"]) == 2
    # data error: missing dataset root
    assert main(["infer", "--data-root", str(tmp_path / "nope"), "--layout", "mvtec",
                 "--out", str(tmp_path), "--backend", "oracle"]) == 3
    # port error: unloadable factory
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(
        f"data_root: {synth_root}\nlayout: synthetic\noutput_dir: {tmp_path}\n"
        "backend: factory\nports_factory: no.such.module:build\nimage_size: 256\n")
    assert main(["infer", "--config", str(cfg)]) == 4


def test_ports_factory_roundtrip(tmp_path, synth_root, monkeypatch):
    import sys
    import types
    module = types.ModuleType("fake_adapters")

    def build():
        from inpaintad.ports import (BiasDenoiser, HashTextEncoder, IdentityCodec,
                                     MultiScalePerceptual, PooledFeatureExtractor,
                                     PortsBundle)
        return PortsBundle(IdentityCodec(), BiasDenoiser(), HashTextEncoder(),
                           PooledFeatureExtractor(pool2=8), MultiScalePerceptual())

    module.build = build
    monkeypatch.setitem(sys.modules, "fake_adapters", module)
    cfg = synth_cfg(synth_root, tmp_path, backend="factory",
                    ports_factory="fake_adapters:build", k=1,
                    scales=(1,), n_steps=2, image_size=64)
    scores_dir = app.cmd_infer(cfg)
    assert len(read_scores(scores_dir)) == 16
