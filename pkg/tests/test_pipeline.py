import json
from dataclasses import replace

import pytest

from adapterlab.checkpoint import read_metadata
from adapterlab.cli import EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_STALE, main
from adapterlab.config import WORKSPACE_ENV, load_config, tiny_config
from adapterlab.pipeline import (STAGES, DependencyError, PipelineError, Runner, StaleArtifactError, downstream,
                                 file_sha256, plan, run_pipeline, workspace_root)
from adapterlab.training_la import LATrainConfig


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    res = run_pipeline(tiny_config(), root)
    return root, res


def test_first_run_builds_everything(built):
    root, res = built
    nodes = plan(tiny_config())
    assert res.built == list(nodes)
    assert res.train_steps > 0
    assert (root / "report/report.txt").read_text().startswith("experiment tiny")


def test_rerun_is_a_no_op(built):
    root, _ = built
    before = json.loads((root / "manifest.json").read_text())
    res = run_pipeline(tiny_config(), root)
    assert res.built == [] and res.train_steps == 0
    assert json.loads((root / "manifest.json").read_text()) == before


def test_manifest_lists_every_output_with_its_hash(built):
    root, _ = built
    cfg = tiny_config()
    m = json.loads((root / "manifest.json").read_text())
    assert m["config_hash"] == cfg.hash()
    listed = {a["path"]: a for a in m["artifacts"]}
    for key, node in plan(cfg).items():
        for rel in node.outputs:
            entry = listed[rel]
            assert entry["sha256"] == file_sha256(root / rel)
            assert entry["node"] == key and entry["recipe_hash"] == node.hash
            assert entry["status"] == "fresh" and entry["deps"] == list(node.deps)
    assert load_config(root / "config.json") == cfg


def test_stamps_record_recipe_hashes(built):
    root, _ = built
    for key, node in plan(tiny_config()).items():
        stamp = root / node.stamp
        meta = read_metadata(stamp) if stamp.suffix == ".ntar" else json.loads(stamp.read_text())
        assert meta["recipe_hash"] == node.hash, key


def test_freeze_audits_are_recorded(built):
    root, _ = built
    for key, node in plan(tiny_config()).items():
        if node.stage in ("train-la", "train-ta"):
            audit = read_metadata(root / node.stamp)["freeze_check"]
            assert audit and all(before == after for before, after in audit.values()), key


def test_fresh_workspaces_are_bitwise_identical(built, tmp_path):
    root, _ = built
    run_pipeline(tiny_config(), tmp_path)
    a = {x["path"]: x["sha256"] for x in json.loads((root / "manifest.json").read_text())["artifacts"]}
    b = {x["path"]: x["sha256"] for x in json.loads((tmp_path / "manifest.json").read_text())["artifacts"]}
    assert a == b


def changed_language_seed(cfg, code, seed):
    return replace(cfg, languages=tuple(replace(l, seed=seed) if l.code == code else l for l in cfg.languages))


def test_invalidation_trace_for_a_non_pretraining_language():
    cfg = tiny_config()
    new = changed_language_seed(cfg, "tc2", 99)
    old_nodes, new_nodes = plan(cfg), plan(new)
    changed = {k for k in old_nodes if old_nodes[k].hash != new_nodes[k].hash}
    roots = {"vocab", "corpus/tc2", "task/ner/tc2", "task/nli/tc2", "la/tc2"}
    assert changed == downstream(new_nodes, roots)
    assert "backbone" not in changed and "la/ta0" not in changed
    assert "ta/ner/MADX/seed0" not in changed and "ta/ner/ALL_MULTI/seed0" in changed
    assert {"eval/ner/MADX/seed0", "analysis/alignment", "report"} <= changed


def test_changing_a_pretraining_language_invalidates_the_backbone():
    cfg = tiny_config()
    old, new = plan(cfg), plan(changed_language_seed(cfg, "tb5", 99))
    assert old["backbone"].hash != new["backbone"].hash
    assert old["corpus/ta0"].hash == new["corpus/ta0"].hash


def test_stale_artifacts_need_force(tmp_path):
    cfg = tiny_config()
    run_pipeline(cfg, tmp_path)
    new = replace(cfg, la_train=LATrainConfig(steps=8, batch_size=4, lr=2e-3, eval_every=4))
    runner = Runner(new, tmp_path)
    assert runner.status("la/tb5") == "stale" and runner.status("corpus/tb5") == "fresh"
    with pytest.raises(StaleArtifactError, match="--force"):
        Runner(new, tmp_path).run()
    stale = {k for k in runner.nodes if runner.status(k) == "stale"}
    res = Runner(new, tmp_path).run(force=True)
    assert set(res.built) == stale
    assert "backbone" in res.skipped
    assert Runner(new, tmp_path).run().built == []


def test_missing_dependency_is_named(tmp_path):
    with pytest.raises(DependencyError, match="ta/ner/MADX/seed0"):
        Runner(tiny_config(), tmp_path).run(["eval"])


def test_stage_by_stage_equals_one_shot(built, tmp_path):
    root, _ = built
    for stage in STAGES:
        Runner(tiny_config(), tmp_path).run([stage])
    assert file_sha256(tmp_path / "report/report.json") == file_sha256(root / "report/report.json")


def test_unknown_stage():
    with pytest.raises(PipelineError):
        Runner(tiny_config(), "/nonexistent").run(["bake"])


def test_workspace_resolution(monkeypatch, tmp_path):
    monkeypatch.delenv(WORKSPACE_ENV, raising=False)
    cfg = replace(tiny_config(), workspace=str(tmp_path / "cfg"))
    assert workspace_root(cfg) == tmp_path / "cfg"
    monkeypatch.setenv(WORKSPACE_ENV, str(tmp_path / "env"))
    assert workspace_root(cfg) == tmp_path / "env"
    assert workspace_root(cfg, tmp_path / "arg") == tmp_path / "arg"


# ------------------------------------------------------------------------ CLI

def test_cli_run_status_and_exit_codes(tmp_path, capsys, monkeypatch):
    ws = str(tmp_path / "ws")
    assert main(["eval", "--preset", "tiny", "--workspace", ws]) == EXIT_DEPENDENCY
    assert "ta/" in capsys.readouterr().err
    monkeypatch.setenv(WORKSPACE_ENV, ws)
    assert main(["run", "--preset", "tiny"]) == 0
    out = capsys.readouterr().out
    assert "built" in out and "[ner]" in out and "[alignment]" in out
    assert main(["status", "--preset", "tiny"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(plan(tiny_config())) and all(l.startswith("fresh") for l in lines)
    assert main(["run", "--preset", "tiny", "--seed", "0", "--seed", "1", "--variant", "MADX",
                 "--stage", "train-ta"]) == 0
    assert (tmp_path / "ws/ta/ner/MADX/seed1.ntar").exists()
    assert not (tmp_path / "ws/ta/ner/ALL_MULTI/seed1.ntar").exists()


def test_cli_config_file_and_errors(tmp_path, capsys):
    path = tmp_path / "c.json"
    assert main(["init-config", str(path), "--preset", "tiny"]) == 0
    d = json.loads(path.read_text())
    assert d["name"] == "tiny"
    ws = str(tmp_path / "ws")
    assert main(["run", "--config", str(path), "--workspace", ws, "--stage", "gen-corpus"]) == 0
    d["corpus"]["low"] = 41
    path.write_text(json.dumps(d))
    assert main(["gen-corpus", "--config", str(path), "--workspace", ws]) == EXIT_STALE
    assert main(["gen-corpus", "--config", str(path), "--workspace", ws, "--force"]) == 0
    d["bogus"] = 1
    path.write_text(json.dumps(d))
    assert main(["run", "--config", str(path), "--workspace", ws]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
