import csv
import io
import json
import logging
from pathlib import Path

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

import softbridge.bench as bench
from softbridge.bench import (
    aggregate,
    emit_frames,
    execute_run,
    load_result_checkpoint,
    report,
    run_single,
)
from softbridge.cli import cli, resolve_config_path
from softbridge.config import (
    ConfigError,
    EvalSpec,
    build_run_config,
    load_run_config,
    run_config_from_snapshot,
    snapshot_dict,
)
from softbridge.nets import load_checkpoint
from softbridge.solver import SolverNets, inference_rollout
from softbridge.tasks import make_task

CONFIG_DIR = Path(__file__).resolve().parents[1] / "src" / "softbridge" / "configs"

TINY_SOLVER = {
    "steps": 10, "batch": 16, "step_budget": 3, "val_every": 2, "val_samples": 32,
    "emb_dim": 8, "y0_hidden": 16, "y0_depth": 1, "z_hidden": 16, "z_depth": 1,
    "estimator": {"kind": "SINKHORN", "target_batch": 32, "target_draws": 1,
                  "sinkhorn_tol": 1e-3, "sinkhorn_max_iter": 80},
}
TINY_DIRECT = {
    "steps": 10, "batch": 24, "step_budget": 3, "val_every": 2, "val_samples": 32,
    "hidden": 16, "depth": 1, "emb_dim": 8,
    "estimator": {"kind": "SINKHORN", "target_batch": 32, "target_draws": 1,
                  "sinkhorn_tol": 1e-3, "sinkhorn_max_iter": 80},
}


def tiny_doc(method="fbsde-terminal", task="N8G", seeds=(0,), **extra):
    doc = {"schema": 1, "task": task, "method": method, "seeds": list(seeds),
           "common": {"eval": {"samples": 32, "target_draws": 2, "rollouts": 2}}}
    if method.startswith("fbsde"):
        doc["common"]["solver"] = dict(TINY_SOLVER)
        if method == "fbsde-marginal":
            doc["common"]["solver"]["lam_f"] = 200.0
    elif method == "direct-sde":
        doc["common"]["direct"] = dict(TINY_DIRECT)
    doc.update(extra)
    return doc


def strip_wall(records):
    out = []
    for r in records:
        r = dict(r)
        r.pop("wall_s", None)
        out.append(r)
    return out


class TestConfig:
    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")),
                             ids=lambda p: p.stem)
    def test_packaged_configs_load_at_both_scales(self, path):
        for paper in (False, True):
            cfg = load_run_config(path, paper_scale=paper)
            assert run_config_from_snapshot(snapshot_dict(cfg)) == cfg

    def test_unknown_solver_key_named(self):
        doc = tiny_doc()
        doc["common"]["solver"]["batchh"] = 4
        with pytest.raises(ConfigError, match=r"solver\.batchh"):
            build_run_config(doc, name="x")

    def test_unknown_top_key_named(self):
        doc = tiny_doc()
        doc["sovler"] = {}
        with pytest.raises(ConfigError, match="sovler"):
            build_run_config(doc, name="x")

    def test_unknown_section_key_named(self):
        doc = tiny_doc()
        doc["desk"] = {"slover": {}}
        with pytest.raises(ConfigError, match=r"desk\.slover"):
            build_run_config(doc, name="x")

    def test_invalid_value_carries_path(self):
        doc = tiny_doc()
        doc["common"]["solver"]["sigma"] = -1.0
        with pytest.raises(ConfigError, match="solver"):
            build_run_config(doc, name="x")

    def test_terminal_method_rejects_running_force(self):
        doc = tiny_doc()
        doc["common"]["solver"]["lam_f"] = 5.0
        with pytest.raises(ConfigError, match=r"solver\.lam_f"):
            build_run_config(doc, name="x")

    def test_marginal_method_requires_running_force(self):
        doc = tiny_doc("fbsde-marginal")
        doc["common"]["solver"]["lam_f"] = 0.0
        with pytest.raises(ConfigError, match=r"solver\.lam_f"):
            build_run_config(doc, name="x")

    def test_direct_method_defaults_missing_section(self):
        # an absent direct: section means library defaults, not an error
        doc = {"task": "DETOUR", "method": "direct-sde", "seeds": [0], "common": {}}
        cfg = build_run_config(doc, name="x")
        assert cfg.direct is not None and cfg.direct.gamma == 0.1

    def test_direct_method_requires_direct_config(self):
        from softbridge.config import RunConfig
        with pytest.raises(ConfigError, match="direct"):
            RunConfig(name="x", task="DETOUR", method="direct-sde", seeds=(0,),
                      eval=EvalSpec(), direct=None)

    def test_empty_seeds_rejected(self):
        with pytest.raises(ConfigError, match="seeds"):
            build_run_config(tiny_doc(seeds=()), name="x")

    def test_unsupported_schema_version(self):
        doc = tiny_doc()
        doc["schema"] = 99
        with pytest.raises(ConfigError, match="schema"):
            build_run_config(doc, name="x")

    def test_seed_override_wins(self):
        cfg = build_run_config(tiny_doc(seeds=(0, 1)), name="x", seed_override=[7])
        assert cfg.seeds == (7,)

    def test_paper_scale_section_applies(self):
        cfg_desk = load_run_config(CONFIG_DIR / "detour-marginal.yaml")
        cfg_paper = load_run_config(CONFIG_DIR / "detour-marginal.yaml", paper_scale=True)
        assert cfg_paper.solver.batch > cfg_desk.solver.batch
        assert cfg_paper.eval.samples > cfg_desk.eval.samples
        # physics is shared between scales
        assert cfg_paper.solver.lam_f == cfg_desk.solver.lam_f == 200.0

    def test_eval_spec_validation(self):
        with pytest.raises(ValueError):
            EvalSpec(samples=1)
        with pytest.raises(ValueError):
            EvalSpec(rollouts=0)


class TestExecuteRun:
    def test_run_directory_contents(self, tmp_path):
        cfg = build_run_config(tiny_doc(), name="tiny")
        records = execute_run(cfg, tmp_path)
        out = tmp_path / "tiny"
        for fname in ("config.json", "records.jsonl", "summary.json",
                      "seed0.npz", "seed0_train.jsonl"):
            assert (out / fname).is_file(), fname
        assert records[0]["status"] == "ok"
        assert records[0]["eval"]["protocol"] == "endpoint"
        summary = json.loads((out / "summary.json").read_text())
        assert "terminal_w2" in summary["metrics"]
        assert summary["seeds_ok"] == [0]

    def test_snapshot_reexecution_is_identical(self, tmp_path):
        cfg = build_run_config(tiny_doc(), name="a")
        rec_a = execute_run(cfg, tmp_path / "one")
        snap = json.loads((tmp_path / "one" / "a" / "config.json").read_text())
        rec_b = execute_run(run_config_from_snapshot(snap), tmp_path / "two")
        assert strip_wall(rec_a) == strip_wall(rec_b)
        na, _ = load_checkpoint(tmp_path / "one" / "a" / "seed0.npz")
        nb, _ = load_checkpoint(tmp_path / "two" / "a" / "seed0.npz")
        for name in na:
            for p in na[name][1].values:
                assert np.array_equal(na[name][1].values[p], nb[name][1].values[p])

    def test_seed_failure_does_not_abort_others(self, tmp_path, monkeypatch):
        real_train = bench.train

        def flaky(cfg, task, seed):
            if seed == 1:
                raise RuntimeError("boom")
            return real_train(cfg, task, seed)

        monkeypatch.setattr(bench, "train", flaky)
        cfg = build_run_config(tiny_doc(seeds=(0, 1)), name="flaky")
        records = execute_run(cfg, tmp_path)
        by_seed = {r["seed"]: r for r in records}
        assert by_seed[0]["status"] == "ok"
        assert by_seed[1]["status"] == "failed"
        assert "boom" in by_seed[1]["error"]
        summary = json.loads((tmp_path / "flaky" / "summary.json").read_text())
        assert summary["seeds_failed"] == [1]
        assert summary["seeds_ok"] == [0]

    def test_linear_method_path_protocol(self, tmp_path):
        cfg = build_run_config(tiny_doc("linear", task="DETOUR"), name="lin")
        records = execute_run(cfg, tmp_path)
        ev = records[0]["eval"]
        assert ev["protocol"] == "path"
        for key in ("terminal_w2", "max_intermediate_w2", "path_w2T",
                    "observed_mean_w2", "mcvs"):
            assert np.isfinite(ev[key])
        # endpoints are pinned, so the straight line nails the terminal law
        # up to sampling noise while missing the detour badly
        assert ev["terminal_w2"] < 0.6
        assert ev["path_w2T"] > 1.0

    def test_direct_method_logs_kinetic_energy(self, tmp_path):
        cfg = build_run_config(tiny_doc("direct-sde", task="DETOUR"), name="dir")
        records = execute_run(cfg, tmp_path)
        assert records[0]["status"] == "ok"
        assert records[0]["eval"]["kinetic_energy"] >= 0.0
        assert "no 1/2" in records[0]["kinetic_convention"]

    def test_parallel_fanout_matches_serial(self, tmp_path):
        cfg = build_run_config(tiny_doc(seeds=(0, 1)), name="par")
        serial = execute_run(cfg, tmp_path / "s", parallelism=1)
        parallel = execute_run(cfg, tmp_path / "p", parallelism=2)
        assert strip_wall(serial) == strip_wall(parallel)

    def test_aggregate_order_independent(self):
        records = [
            {"seed": 0, "status": "ok", "eval": {"terminal_w2": 1.0, "mcvs": 0.2}},
            {"seed": 1, "status": "ok", "eval": {"terminal_w2": 3.0, "mcvs": 0.4}},
        ]
        a = aggregate(records)
        b = aggregate(records[::-1])
        assert a == b
        assert a["metrics"]["terminal_w2"]["mean"] == pytest.approx(2.0)
        assert a["metrics"]["terminal_w2"]["std"] == pytest.approx(np.sqrt(2.0))

    def test_checkpoint_roundtrip_rolls(self, tmp_path):
        cfg = build_run_config(tiny_doc(), name="ck")
        execute_run(cfg, tmp_path)
        run_cfg, nets, extra = load_result_checkpoint(tmp_path / "ck" / "seed0.npz")
        assert extra["kind"] == "fbsde"
        assert isinstance(nets, SolverNets)
        task = make_task(run_cfg.task)
        fs = inference_rollout(run_cfg.solver, nets, task, 8, seed=1,
                               frame_times=[0.0, 1.0])
        assert fs.frames[-1].shape == (8, 2)


class TestReport:
    def _mk_summary(self, d, **kw):
        d.mkdir(parents=True)
        base = {"schema": 1, "name": d.name, "task": "N8G", "method": "fbsde-terminal",
                "seeds_ok": [0], "seeds_failed": [],
                "metrics": {"terminal_w2": {"mean": 0.4, "std": 0.01, "n": 1}}}
        base.update(kw)
        (d / "summary.json").write_text(json.dumps(base))

    def test_csv_and_table(self, tmp_path):
        self._mk_summary(tmp_path / "a")
        self._mk_summary(tmp_path / "b", method="direct-sde",
                         metrics={"terminal_w2": {"mean": 0.9, "std": 0.2, "n": 2},
                                  "kinetic_energy": {"mean": 12.0, "std": 1.0, "n": 2}})
        csv_text, table, missing = report([tmp_path / "a", tmp_path / "b"])
        assert missing == []
        rows = list(csv.DictReader(io.StringIO(csv_text)))
        assert len(rows) == 2
        by_method = {r["method"]: r for r in rows}
        assert by_method["fbsde-terminal"]["terminal_w2_mean"] == "0.4"
        assert by_method["fbsde-terminal"]["kinetic_energy_mean"] == ""
        assert "direct-sde" in table and "fbsde-terminal" in table
        assert "kinetic_energy" in table

    def test_partial_on_missing(self, tmp_path, caplog):
        self._mk_summary(tmp_path / "a")
        with caplog.at_level(logging.WARNING):
            csv_text, table, missing = report([tmp_path / "a", tmp_path / "ghost"])
        assert [str(tmp_path / "ghost")] == missing
        assert "ghost" in caplog.text
        assert "fbsde-terminal" in table

    def test_empty_input_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            csv_text, table, missing = report([])
        assert "no runs" in caplog.text
        assert csv_text.startswith("task,method,name")
        assert table.strip() != ""


class TestFrames:
    def test_deterministic_bytes_and_layering(self, tmp_path):
        cfg = build_run_config(tiny_doc("linear", task="DETOUR"), name="lin")
        execute_run(cfg, tmp_path)
        run_dir = tmp_path / "lin"
        first = emit_frames(run_dir, out_dir=tmp_path / "f1", samples=64)
        second = emit_frames(run_dir, out_dir=tmp_path / "f2", samples=64)
        assert len(first) == 6
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()
        svg = first[2].read_text()
        # gray target layer is drawn before (beneath) the generated layer
        assert svg.index("#b0b0b0") < svg.index("#1f6fb2")
        assert svg.count("<circle") == 2 * 64

    def test_fixed_axes_across_frames(self, tmp_path):
        cfg = build_run_config(tiny_doc("linear", task="DETOUR"), name="lin")
        execute_run(cfg, tmp_path)
        paths = emit_frames(tmp_path / "lin", samples=32)
        views = {p.read_text().split("\n")[0] for p in paths}
        assert len(views) == 1

    def test_endpoint_task_interior_frames_have_no_target(self, tmp_path):
        cfg = build_run_config(tiny_doc(), name="tiny")
        execute_run(cfg, tmp_path)
        paths = emit_frames(tmp_path / "tiny", samples=32)
        mid = paths[2].read_text()
        last = paths[-1].read_text()
        assert "#b0b0b0" not in mid
        assert "#b0b0b0" in last


class TestCli:
    def test_validate_config_packaged_and_bad(self, tmp_path):
        runner = CliRunner()
        res = runner.invoke(cli, ["validate-config", "smoke"])
        assert res.exit_code == 0
        assert "ok (fbsde-terminal on N8G" in res.output
        bad = tmp_path / "bad.yaml"
        doc = tiny_doc()
        doc["common"]["solver"]["batchh"] = 1
        bad.write_text(yaml.safe_dump(doc))
        res = runner.invoke(cli, ["validate-config", str(bad)])
        assert res.exit_code == 1
        assert "solver.batchh" in res.output

    def test_resolve_config_path(self):
        assert resolve_config_path("smoke").name == "smoke.yaml"
        with pytest.raises(FileNotFoundError):
            resolve_config_path("not-a-config")

    def test_run_report_frames_cycle(self, tmp_path):
        cfgfile = tmp_path / "tiny.yaml"
        cfgfile.write_text(yaml.safe_dump(tiny_doc()))
        runner = CliRunner()
        res = runner.invoke(cli, ["run", str(cfgfile), "--output-dir", str(tmp_path / "runs"),
                                  "--seeds", "5"])
        assert res.exit_code == 0, res.output
        records = [json.loads(line) for line in
                   (tmp_path / "runs" / "tiny" / "records.jsonl").read_text().splitlines()]
        assert [r["seed"] for r in records] == [5]

        res = runner.invoke(cli, ["report", str(tmp_path / "runs" / "tiny"),
                                  "--csv", str(tmp_path / "out.csv")])
        assert res.exit_code == 0
        assert "fbsde-terminal" in res.output
        assert (tmp_path / "out.csv").read_text().startswith("task,method")

        res = runner.invoke(cli, ["frames", str(tmp_path / "runs" / "tiny"),
                                  "--samples", "16", "--seed", "5"])
        assert res.exit_code == 0, res.output
        assert len(list((tmp_path / "runs" / "tiny" / "frames").glob("*.svg"))) == 6

    def test_run_invalid_config_exits_nonzero(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        doc = tiny_doc()
        doc["method"] = "fbsde-sideways"
        bad.write_text(yaml.safe_dump(doc))
        runner = CliRunner()
        res = runner.invoke(cli, ["run", str(bad), "--output-dir", str(tmp_path / "runs")])
        assert res.exit_code == 1

    def test_report_missing_dir_exits_nonzero(self, tmp_path):
        runner = CliRunner()
        res = runner.invoke(cli, ["report", str(tmp_path / "ghost")])
        assert res.exit_code == 1