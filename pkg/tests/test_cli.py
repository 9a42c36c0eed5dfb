import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from manifold_bsde import cli
from manifold_bsde import config as cf
from manifold_bsde.errors import ConfigError

SMALL_SOLVE = {
    "manifold": {"kind": "sphere"},
    "diffusion": {"y": [0.0, 0.0], "T": 1.0, "steps": 10, "paths": 400},
    "terminal": {"name": "ball", "radius": 0.5},
    "solver": {"domain": {"radius": 0.785}},
}


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def invoke(tmp_path, command, cfg=None, *extra, out="out"):
    args = [command, "--out", str(tmp_path / out)]
    if cfg is not None:
        args += ["--config", str(write_config(tmp_path, cfg, f"{out}.json"))]
    return cli.run(args + list(extra))


def manifest(tmp_path, out="out"):
    return json.loads((tmp_path / out / "manifest.json").read_text())


class TestConfig:
    def test_defaults_parse(self):
        cfg = cf.parse_config("")
        assert cfg.seed == 0 and cfg.output == "out"

    def test_invalid_json(self):
        with pytest.raises(ConfigError, match="<root>"):
            cf.parse_config("{")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            cf.parse_config('{"bogus": 1}')

    def test_exponent_range(self):
        with pytest.raises(ConfigError) as info:
            cf.parse_config('{"gauge": {"kind": "sin_power", "a": 2.5}}')
        assert info.value.field == "gauge.a"

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError) as info:
            cf.parse_config('{"diffusion": {"dim": 2}}')
        assert info.value.field == "diffusion.dim"
        with pytest.raises(ConfigError, match="dirichlet.domain.radios"):
            cf.parse_config('{"dirichlet": {"domain": {"kind": "disk", "radios": 1}}}')

    def test_diffusion_seed(self):
        assert cf.parse_config('{"diffusion": {"seed": 9}}').seed == 9
        assert cf.parse_config('{"seed": 4, "diffusion": {"seed": 9}}').seed == 4

    def test_seed_range(self):
        with pytest.raises(ConfigError, match="seed"):
            cf.parse_config('{"seed": -1}')

    def test_strict_ball(self):
        with pytest.raises(ConfigError):
            cf.parse_config(json.dumps({"solver": {"domain": {"radius": 1.6, "strict_ball": True}}}))

    def test_hash_tracks_text(self):
        a, b = cf.parse_config('{"seed": 1}'), cf.parse_config('{"seed": 2}')
        assert a.sha256 != b.sha256 and len(a.sha256) == 64


class TestSubcommands:
    def test_nonuniqueness_defaults(self, tmp_path):
        assert invoke(tmp_path, "nonuniqueness-demo") == 0
        man = manifest(tmp_path)
        assert man["summary"]["distance_X0"] == np.pi and man["pass"]

    def test_bad_exponent_exit(self, tmp_path, capsys):
        code = invoke(tmp_path, "submartingale", {"gauge": {"kind": "sin_power", "a": 2.5}})
        assert code == cli.EXIT_CONFIG
        assert "gauge.a" in capsys.readouterr().err

    def test_flat_2tp2(self, tmp_path):
        cfg = {"manifold": {"kind": "flat", "dim": 2}, "diagnostics": {"estimates": ["2tp2"], "samples": 200}}
        assert invoke(tmp_path, "check-estimates", cfg) == 0
        rows = list(csv.DictReader((tmp_path / "out" / "estimates.csv").open()))
        assert rows[0]["estimate"] == "2tp2" and float(rows[0]["min_margin"]) >= 0

    def test_unknown_estimate(self, tmp_path):
        cfg = {"diagnostics": {"estimates": ["nope"]}}
        assert invoke(tmp_path, "check-estimates", cfg) == cli.EXIT_CONFIG

    def test_solve_outputs(self, tmp_path):
        assert invoke(tmp_path, "solve", SMALL_SOLVE) == 0
        out = tmp_path / "out"
        header = (out / "solution.csv").read_text().splitlines()[0].split(",")
        assert header[:3] == ["path", "step", "time"]
        meta = json.loads((out / "metadata.json").read_text())
        assert meta["picard_residuals"][-1] < 1e-6

    def test_dirichlet_outputs(self, tmp_path):
        cfg = {"manifold": {"kind": "flat", "dim": 1},
               "dirichlet": {"domain": {"kind": "disk"}, "boundary_map": "x", "paths": 300, "steps": 200,
                             "query_grid": {"per_axis": 3}}}
        assert invoke(tmp_path, "dirichlet", cfg) == 0
        rows = list(csv.reader((tmp_path / "out" / "field.csv").open()))
        assert rows[0] == ["x0", "x1", "value0", "std_error", "truncation_mass"] and len(rows) == 10

    def test_solved_pair_reports(self, tmp_path):
        cfg = {**SMALL_SOLVE, "diagnostics": {"count": 500, "solve_pair": True, "q0": 1.7}}
        cfg["diffusion"] = {**SMALL_SOLVE["diffusion"], "steps": 20, "paths": 3000}
        assert invoke(tmp_path, "submartingale", cfg) == 0
        records = json.loads((tmp_path / "out" / "report.json").read_text())
        details = records[1]["details"]
        assert set(details["lq_norms"]) == {"q=1.1", "q=1.25", "q=1.5", "q=1.7"}
        assert details["energy_exp_moment"]["estimate"] >= 1.0

    def test_q0_range(self, tmp_path):
        cfg = {**SMALL_SOLVE, "diagnostics": {"count": 100, "solve_pair": True, "q0": 1.0}}
        assert invoke(tmp_path, "submartingale", cfg) == cli.EXIT_CONFIG

    def test_library_error_exit(self, tmp_path):
        cfg = {"manifold": {"kind": "flat", "dim": 1},
               "dirichlet": {"domain": {"kind": "interval"}, "T_max": 0.2, "steps": 20, "paths": 200}}
        assert invoke(tmp_path, "dirichlet", cfg) == cli.EXIT_ERROR
        assert manifest(tmp_path)["pass"] is False


class TestProvenance:
    CFG = {"diffusion": {"y": [0.0, 0.0], "T": 1.0, "steps": 8, "paths": 40}, "seed": 11}

    def test_byte_identical_across_workers(self, tmp_path):
        assert invoke(tmp_path, "simulate", self.CFG, "--workers", "1", out="a") == 0
        assert invoke(tmp_path, "simulate", self.CFG, "--workers", "3", out="b") == 0
        a = (tmp_path / "a" / "ensemble.csv").read_bytes()
        assert a == (tmp_path / "b" / "ensemble.csv").read_bytes()
        assert manifest(tmp_path, "b")["workers"] == 3

    def test_seed_override(self, tmp_path):
        invoke(tmp_path, "simulate", self.CFG, out="a")
        invoke(tmp_path, "simulate", self.CFG, "--seed", "12", out="b")
        assert manifest(tmp_path, "b")["seed"] == 12
        assert (tmp_path / "a" / "ensemble.csv").read_bytes() != (tmp_path / "b" / "ensemble.csv").read_bytes()

    def test_manifest_hashes(self, tmp_path):
        invoke(tmp_path, "simulate", self.CFG)
        man = manifest(tmp_path)
        assert {o["file"] for o in man["outputs"]} == {"ensemble.csv", "report.json"}
        for o in man["outputs"]:
            data = (tmp_path / "out" / o["file"]).read_bytes()
            assert hashlib.sha256(data).hexdigest() == o["sha256"]
        assert man["config_sha256"] == cf.parse_config(json.dumps(self.CFG)).sha256
        assert set(man["versions"]) == {"manifold_bsde", "numpy", "python"}

    def test_float_format(self, tmp_path):
        invoke(tmp_path, "simulate", self.CFG)
        row = (tmp_path / "out" / "ensemble.csv").read_text().splitlines()[12].split(",")
        value = row[3]
        assert float(value) == float("%.17g" % float(value)) and len(value.lstrip("-").replace(".", "")) >= 15

    def test_env_workers(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MANIFOLD_BSDE_WORKERS", "2")
        invoke(tmp_path, "simulate", self.CFG)
        assert manifest(tmp_path)["workers"] == 2

    def test_bad_workers(self, tmp_path):
        assert invoke(tmp_path, "simulate", self.CFG, "--workers", "0") == cli.EXIT_CONFIG


class TestStrict:
    CFG = {"manifold": {"kind": "flat", "dim": 1},
           "diffusion": {"y": [0.0], "T": 1.0, "steps": 20, "paths": 500},
           "terminal": {"name": "ball", "center": [0.0], "radius": 0.98, "scale": 2.0},
           "solver": {"domain": {"center": [0.0], "radius": 1.0}}}

    def test_warning_recorded(self, tmp_path):
        assert invoke(tmp_path, "solve", self.CFG) == 0
        assert any("projected" in w for w in manifest(tmp_path)["warnings"])

    def test_strict_fails_on_warning(self, tmp_path):
        assert invoke(tmp_path, "solve", self.CFG, "--strict") == cli.EXIT_FAILED
        assert manifest(tmp_path)["pass"] is False


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "manifold_bsde", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
