import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from casa.cli import main
from casa.fixtures import make_fixture
from casa.routing import interference_maps, ClusterSet
from casa.schemas import validate
from casa.tensor_store import LoraAdapter, LoraPair, load_adapter, load_checkpoint, lora_delta


def run(*argv):
    return main([str(a) for a in argv])


def report(out, name):
    return json.loads((Path(out) / name).read_text())


def test_analyze_self_drift_is_zero(tmp_path):
    fx = make_fixture(seed=1, n_layers=2, drift_rigidity=0.0)
    paths = fx.write(tmp_path / "fx")
    out = tmp_path / "out"
    assert run("analyze", "--manifest", paths["manifest"], "--out", out, "--window", "head:0:10", "--jobs", 1) == 0
    rep = report(out, "analyze_report.json")
    validate(rep, "analyze")
    assert rep["summary"]["max_rho2_target"] == 0.0 and rep["summary"]["n_layers"] == 2
    assert all(layer["rho2_target"] == 0.0 for layer in rep["layers"])
    spectra = load_checkpoint(out / "spectra.safetensors")
    assert "blocks.0.proj.weight/source" in spectra.extras
    sims = load_checkpoint(out / "similarity.safetensors")
    sim = sims["blocks.0.proj.weight/target/head"]
    np.testing.assert_allclose(sim, np.eye(10), atol=1e-12)


def test_cluster_reports_and_recomputes(fixture_dir, tmp_path):
    out = tmp_path / "rot"
    assert run("cluster", "--manifest", fixture_dir / "manifest.json", "--out", out, "--jobs", 2) == 0
    rep = report(out, "cluster_report.json")
    validate(rep, "cluster")
    tensors = load_checkpoint(out / "cluster_tensors.safetensors")
    for layer in rep["layers"]:
        assert layer["method"] == "rotation-graph"
        labels = np.empty(layer["k"], dtype=int)
        for c, members in enumerate(layer["clusters"]):
            labels[members] = c
        cs = ClusterSet.from_labels(labels, "rotation-graph")
        key = layer["key"]
        overlap, alignment = interference_maps(tensors[f"{key}/C_lora"], tensors[f"{key}/C_fft"], cs)
        np.testing.assert_array_equal(overlap, np.array(layer["overlap"]))
        np.testing.assert_array_equal(alignment, np.array(layer["alignment"]))

    out2 = tmp_path / "ana"
    assert run("cluster", "--manifest", fixture_dir / "manifest.json", "--out", out2, "--mode", "analysis-graph") == 0
    rep2 = report(out2, "cluster_report.json")
    assert {layer["method"] for layer in rep2["layers"]} == {"analysis-graph"}
    assert rep2["config"]["mode"] == "analysis-graph" and rep["config"]["mode"] == "rotation-graph"


def test_cluster_zero_lora_gives_singletons(tmp_path):
    fx = make_fixture(seed=2, n_layers=1)
    pairs = {b: LoraPair(A=p.A, B=np.zeros_like(p.B), alpha=p.alpha, has_alpha=True, dtype=p.dtype)
             for b, p in fx.adapter.pairs.items()}
    fx.adapter = LoraAdapter(pairs)
    paths = fx.write(tmp_path / "fx")
    assert run("cluster", "--manifest", paths["manifest"]) == 0
    layer = report(tmp_path / "fx" / "out", "cluster_report.json")["layers"][0]
    assert layer["M"] == layer["k"] and all(s == 1 for s in layer["cluster_sizes"])


def test_transfer_without_drift_reproduces_lora(tmp_path):
    fx = make_fixture(seed=3, n_layers=2, drift_rigidity=0.0)
    paths = fx.write(tmp_path / "fx")
    start = time.perf_counter()
    assert run("transfer", "--manifest", paths["manifest"], "--jobs", 1) == 0
    assert time.perf_counter() - start < 5.0
    out = tmp_path / "fx" / "out"
    validate(report(out, "transfer_report.json"), "transfer")
    new = load_adapter(out / "adapter.safetensors")
    for base, pair in fx.adapter.pairs.items():
        assert new.pairs[base].alpha == pair.alpha
        np.testing.assert_allclose(lora_delta(new.pairs[base]), lora_delta(pair), atol=1e-8)


def test_transfer_include_passthrough(fixture_dir, tmp_path):
    out = tmp_path / "out"
    assert run("transfer", "--manifest", fixture_dir / "manifest.json", "--out", out,
               "--include", "blocks.0.*", "--jobs", 1) == 0
    rep = report(out, "transfer_report.json")
    assert [layer["key"] for layer in rep["layers"]] == ["blocks.0.proj.weight"]
    assert "blocks.1.proj" in rep["passthrough"]
    orig = load_adapter(fixture_dir / "lora.safetensors")
    new = load_adapter(out / "adapter.safetensors")
    assert np.array_equal(new.pairs["blocks.1.proj"].A, orig.pairs["blocks.1.proj"].A)


def test_missing_lora_reports_error(fixture_dir, tmp_path, capsys):
    code = run("transfer", "--source", fixture_dir / "source.safetensors",
               "--target", fixture_dir / "target.safetensors", "--out", tmp_path)
    assert code == 2
    err = json.loads(capsys.readouterr().out)
    validate(err, "error")
    assert err["error"]["kind"] == "KeyError" and err["error"]["message"] == "lora"
    code = run("transfer", "--manifest", fixture_dir / "manifest.json", "--lora", tmp_path / "nope.safetensors",
               "--out", tmp_path)
    assert code == 2
    assert json.loads(capsys.readouterr().out)["error"]["kind"] == "IoError"


def test_ablate_partial_sweep(fixture_dir, tmp_path):
    out = tmp_path / "abl"
    assert run("ablate", "partial", "--manifest", fixture_dir / "manifest.json", "--out", out,
               "--q-sweep", "0,0.4,0.5,0.6,0.7,0.8,0.9") == 0
    rep = report(out, "ablate_report.json")
    validate(rep, "ablate")
    assert (out / "partial_q0.00.safetensors").read_bytes() == (fixture_dir / "target.safetensors").read_bytes()
    removed = [r["removed_fraction"] for r in rep["runs"] if r["q"] >= 0.4]
    assert all(a <= b for a, b in zip(removed, removed[1:]))
    assert rep["runs"][0]["removed_energy"] == 0.0


def test_ablate_overactivate_deterministic(fixture_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out, jobs in ((a, 1), (b, 4)):
        assert run("ablate", "overactivate", "--manifest", fixture_dir / "manifest.json", "--out", out,
                   "--seed", 5, "--jobs", jobs) == 0
    assert (a / "overactivate_seed5.safetensors").read_bytes() == (b / "overactivate_seed5.safetensors").read_bytes()
    assert (a / "ablate_report.json").read_bytes() == (b / "ablate_report.json").read_bytes()


def test_flags_override_manifest(fixture_dir, tmp_path):
    man = json.loads((fixture_dir / "manifest.json").read_text())
    man["config"] = {"q_dom": 0.9, "tau": 3.0}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(man))
    out = tmp_path / "o"
    assert run("transfer", "--manifest", path, "--q-dom", 0.25, "--out", out, "--include", "blocks.0.*") == 0
    cfg = report(out, "transfer_report.json")["config"]
    assert cfg["q_dom"] == 0.25 and cfg["tau"] == 3.0 and cfg["q_act"] == 0.95


def test_relative_manifest_paths(fixture_dir, tmp_path):
    rel = {"source": "source.safetensors", "target": "target.safetensors", "lora": "lora.safetensors",
           "output": str(tmp_path / "rel")}
    path = Path(fixture_dir) / "rel_manifest.json"
    path.write_text(json.dumps(rel))
    assert run("analyze", "--manifest", path) == 0
    assert (tmp_path / "rel" / "analyze_report.json").exists()


def test_jobs_from_environment(monkeypatch):
    from casa.cli import resolve_jobs

    monkeypatch.setenv("CASA_JOBS", "3")
    assert resolve_jobs(None) == 3
    assert resolve_jobs(5) == 5
    monkeypatch.delenv("CASA_JOBS")
    assert resolve_jobs(None) >= 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "casa", "--version"], capture_output=True, text=True, check=True)
    assert res.stdout.strip().startswith("casa ")


def test_bad_config_value(fixture_dir, capsys):
    assert run("transfer", "--manifest", fixture_dir / "manifest.json", "--q-act", 1.5) == 2
    assert json.loads(capsys.readouterr().out)["error"]["kind"] == "ValueError"


@pytest.mark.parametrize("window", ["bad", "a:3:1", "a:x:2"])
def test_window_parsing_rejects(window):
    with pytest.raises(SystemExit):
        main(["analyze", "--source", "x", "--window", window])
