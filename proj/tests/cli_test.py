#!/usr/bin/env python3
"""End-to-end checks of the covadj command line.

Usage: cli_test.py <covadj-binary> <report-schema.json>
"""

import csv
import json
import os
import pathlib
import subprocess
import sys
import tempfile
import unittest

import jsonschema

CLI = ""
VALIDATOR = None


def run(*args, env=None, check=True):
    proc = subprocess.run([CLI, *map(str, args)], capture_output=True, text=True, env=env)
    if check and proc.returncode != 0:
        raise AssertionError(f"{args} exited {proc.returncode}: {proc.stderr}")
    return proc


def load(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def files_except_manifest(root):
    root = pathlib.Path(root)
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }


class CliTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = pathlib.Path(cls.tmp.name)
        run("--seed", 3, "--out", cls.root / "sim", "simulate", "--n-units", 1500, "--k-covariates", 3,
            "--outcome-cor", 0.7, "--true-ate", 0.3, "--baseline", 10, "--daily-arrivals", 100)
        cls.data = cls.root / "sim" / "data.csv"

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def out(self, name):
        return self.root / name

    def assert_valid(self, path):
        report = load(path)
        errors = sorted(VALIDATOR.iter_errors(report), key=str)
        self.assertFalse(errors, f"{path}: {errors[:3]}")
        return report

    def assert_manifest(self, out_dir, command):
        manifest = load(out_dir / "manifest.json")
        self.assertEqual(manifest["command"], command)
        self.assertIn("timings_ms", manifest)
        for name in manifest["outputs"]:
            self.assertTrue((out_dir / name).exists(), name)

    def test_simulate(self):
        report = self.assert_valid(self.root / "sim" / "report.json")
        self.assertEqual(report["n_units"], 1500)
        with open(self.data, newline="") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(len(rows), 1500)
        self.assertIn("day", rows[0])
        self.assert_manifest(self.root / "sim", "simulate")

    def test_estimate(self):
        out = self.out("estimate")
        run("--seed", 1, "--out", out, "estimate", "--input", self.data,
            "--models", "ols,ridge,lasso,elastic_net(mix=0.5),pcr,two_step:ols", "--day", 7)
        report = self.assert_valid(out / "report.json")
        ids = [e["model_id"] for e in report["estimates"]]
        self.assertEqual(ids[0], "dim")
        self.assertEqual(len(ids), 7)
        self.assertEqual(report["day"], 7)
        dim = report["estimates"][0]
        self.assertEqual(dim["variance_reduction"], 0)
        for e in report["estimates"]:
            self.assertLessEqual(e["ci"][0], e["ate"])
            self.assertLessEqual(e["ate"], e["ci"][1])
        with open(out / "estimates.csv", newline="") as f:
            self.assertEqual(len(list(csv.DictReader(f))), 7)
        self.assert_manifest(out, "estimate")

    def test_four_row_csv(self):
        path = self.root / "four.csv"
        path.write_text("assignment,outcome,x\n0,1,1\n0,2,3\n1,3,2\n1,5,4\n")
        out = self.out("four")
        run("--out", out, "estimate", "--input", path, "--models", "dim")
        report = self.assert_valid(out / "report.json")
        self.assertEqual(len(report["estimates"]), 1)
        self.assertAlmostEqual(report["estimates"][0]["ate"], 2.5, places=12)

    def test_aa_splits(self):
        out = self.out("aa")
        run("--seed", 2, "--out", out, "aa", "--input", self.data, "--models", "ols,ridge",
            "--s-splits", 40, "--kappa", 4)
        report = self.assert_valid(out / "report.json")
        self.assertEqual(report["aa"]["s_splits"], 40)
        self.assertEqual(len(report["buckets"]["buckets"]), 4)
        with open(out / "splits.csv", newline="") as f:
            self.assertEqual(len(list(csv.DictReader(f))), 40 * 3)

    def test_stress(self):
        out = self.out("stress")
        run("--seed", 4, "--out", out, "stress", "--input", self.data, "--models", "dim,ols",
            "--folds", "1,2", "--draws", 3)
        report = self.assert_valid(out / "report.json")
        self.assertEqual(len(report["stress"]["summaries"]), 4)
        with open(out / "stress.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(len(rows), 4)
        self.assertTrue(all(r["runtime_ms"] == "" for r in rows))

    def test_power(self):
        out = self.out("power")
        run("--seed", 5, "--out", out, "power", "--input", self.data, "--models", "ols", "--day", 5,
            "--delta", 0.02)
        report = self.assert_valid(out / "report.json")
        by_model = {d["model_id"]: d for d in report["durations"]}
        self.assertEqual(set(by_model), {"dim", "ols"})
        for d in by_model.values():
            self.assertEqual(d["D"], 5)
            self.assertEqual(d["horizon"], 50)
            if d["D_prime"] is not None:
                self.assertGreater(d["D_prime"], 5)

    def test_batch_and_aggregate(self):
        out = self.out("batch")
        run("--seed", 6, "--out", out, "batch", "--models", "ols", "--n-units", 600, "--experiments", 3,
            "--days", "7,28", "--daily-arrivals", 30, "--delta", 0.05)
        reports = sorted((out / "reports").glob("*.json"))
        self.assertEqual(len(reports), 6)
        for r in reports:
            self.assertEqual(self.assert_valid(r)["kind"], "batch_item")
        agg = self.assert_valid(out / "aggregate.json")
        self.assertEqual(agg["reports"], 6)
        self.assertEqual(set(agg["days"]), {"7", "28"})
        self.assertTrue((out / "aggregate_vr.csv").exists())

        again = self.out("aggregate")
        run("--out", again, "aggregate", "--reports", *reports)
        self.assertEqual(load(again / "aggregate.json"), agg)

    def test_determinism(self):
        for name, args in [
            ("estimate", ["estimate", "--input", self.data, "--models", "lasso,pcr"]),
            ("aa", ["aa", "--input", self.data, "--models", "ols", "--s-splits", 30, "--kappa", 3]),
            ("stress", ["stress", "--input", self.data, "--models", "ridge", "--draws", 3]),
        ]:
            a, b = self.out(f"det_{name}_a"), self.out(f"det_{name}_b")
            run("--seed", 9, "--out", a, *args)
            run("--seed", 9, "--out", b, *args)
            fa, fb = files_except_manifest(a), files_except_manifest(b)
            self.assertTrue(fa)
            self.assertEqual(fa, fb, name)

    def test_config_file(self):
        ini = self.root / "run.ini"
        ini.write_text(f"seed=12\n[estimate]\ninput={self.data}\nmodels=ols\nalpha=0.1\n")
        out = self.out("config")
        run("--config", ini, "--out", out, "estimate")
        report = self.assert_valid(out / "report.json")
        self.assertEqual(report["seed"], 12)
        self.assertEqual(report["config"]["alpha"], 0.1)
        self.assertEqual([e["model_id"] for e in report["estimates"]], ["dim", "ols"])

    def test_out_from_environment(self):
        env = dict(os.environ, COVADJ_OUT=str(self.out("from_env")))
        run("simulate", "--n-units", 50, env=env)
        self.assertTrue((self.out("from_env") / "data.csv").exists())

    def error_of(self, *args):
        proc = run(*args, check=False)
        return proc.returncode, json.loads(proc.stderr.strip().splitlines()[-1])["error"]

    def test_errors(self):
        code, err = self.error_of("--out", self.out("e1"), "estimate", "--input", self.root / "missing.csv")
        self.assertEqual(code, 2)
        self.assertEqual(err["kind"], "validation_error")

        bad = self.root / "bad.csv"
        bad.write_text("assignment,outcome,x\n0,1,1\n1,oops,2\n0,2,3\n1,4,4\n")
        code, err = self.error_of("--out", self.out("e2"), "estimate", "--input", bad)
        self.assertEqual(code, 2)
        self.assertEqual(err["row"], 2)

        code, err = self.error_of("--out", self.out("e3"), "estimate", "--input", self.data, "--models", "nope")
        self.assertEqual(code, 2)

        code, err = self.error_of("--out", self.out("e4"), "estimate", "--input", self.data, "--alpha", 1.5)
        self.assertEqual(code, 2)

        code, _ = self.error_of("--out", self.out("e5"), "power", "--input", self.data, "--day", 7,
                                "--delta", 0)
        self.assertEqual(code, 2)

        self.assertNotEqual(run("bogus-command", check=False).returncode, 0)


if __name__ == "__main__":
    CLI = sys.argv[1]
    with open(sys.argv[2], encoding="utf-8") as f:
        schema = json.load(f)
    jsonschema.Draft202012Validator.check_schema(schema)
    VALIDATOR = jsonschema.Draft202012Validator(schema)
    unittest.main(argv=[sys.argv[0], "-v"])
