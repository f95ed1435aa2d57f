import csv
import json

import numpy as np
import pytest

from crossrank.cli import (
    EXIT_CHECK_FAILED,
    EXIT_DATA,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    main,
    read_rankings_csv,
)
from crossrank.embedstore import from_arrays, save_embedding_set
from crossrank.synth import SynthSpec


def run(*argv):
    return main(["-q", *map(str, argv)])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("gen-synth", "--out-dir", out) == EXIT_OK
    return out


def pair(d):
    return ["--gallery", d / "gallery.json", "--queries", d / "queries.json"]


class TestPipeline:
    def test_gen_rerank_eval(self, synth_dir, tmp_path):
        assert run("rank", *pair(synth_dir), "--out", tmp_path / "plain.csv") == EXIT_OK
        assert run("rerank", *pair(synth_dir), "--out", tmp_path / "rr.csv",
                   "--trace-out", tmp_path / "trace.csv") == EXIT_OK
        for name in ("plain", "rr"):
            assert run("eval", "--rankings", tmp_path / f"{name}.csv",
                       "--gallery-labels", synth_dir / "gallery.json",
                       "--query-labels", synth_dir / "queries.labels.csv",
                       "--k", "all,10,200", "--out", tmp_path / f"{name}.json") == EXIT_OK
        before = json.loads((tmp_path / "plain.json").read_text())
        after = json.loads((tmp_path / "rr.json").read_text())
        assert set(before["mAP"]) == {"all", "10", "200"}
        assert after["mAP"]["all"] >= before["mAP"]["all"]
        rows = list(csv.DictReader((tmp_path / "trace.csv").open()))
        assert rows[0]["iteration"] == "0" and rows[0]["ap"] != ""

    def test_beta_zero_matches_rank(self, synth_dir, tmp_path):
        run("rank", *pair(synth_dir), "--out", tmp_path / "a.csv")
        run("rerank", *pair(synth_dir), "--beta", 0, "--out", tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_rankings_format(self, synth_dir, tmp_path):
        run("rank", *pair(synth_dir), "--out", tmp_path / "a.csv")
        header = (tmp_path / "a.csv").read_text().splitlines()[0]
        assert header == "query_id,rank,gallery_id,distance"
        qids, ranked = read_rankings_csv(tmp_path / "a.csv")
        assert len(qids) == 20 and all(len(r) == 200 for r in ranked)

    def test_threads_do_not_change_output(self, synth_dir, tmp_path, monkeypatch):
        run("rerank", *pair(synth_dir), "--threads", 1, "--out", tmp_path / "t1.csv")
        run("rerank", *pair(synth_dir), "--threads", 4, "--out", tmp_path / "t4.csv")
        monkeypatch.setenv("CROSSRANK_THREADS", "3")
        run("rerank", *pair(synth_dir), "--threads", 1, "--out", tmp_path / "env.csv")
        a = (tmp_path / "t1.csv").read_bytes()
        assert a == (tmp_path / "t4.csv").read_bytes() == (tmp_path / "env.csv").read_bytes()

    def test_dump_dir(self, synth_dir, tmp_path):
        run("rerank", *pair(synth_dir), "--out", tmp_path / "r.csv", "--dump-dir", tmp_path / "dump")
        assert (tmp_path / "dump" / "gallery_gallery_ranks.csv").is_file()


class TestTrace:
    def test_beta_zero_flat(self, synth_dir, tmp_path):
        assert run("trace", *pair(synth_dir), "--beta", 0, "--out", tmp_path / "t.csv") == EXIT_OK
        rows = list(csv.DictReader((tmp_path / "t.csv").open()))
        assert len(rows) == 1 and rows[0]["iteration"] == "0"

    def test_chain_trace(self, synth_dir, tmp_path):
        run("trace", *pair(synth_dir), "--out", tmp_path / "t.csv")
        rows = list(csv.DictReader((tmp_path / "t.csv").open()))
        its = [int(r["iteration"]) for r in rows]
        maps = [float(r["map_all"]) for r in rows]
        assert its == sorted(set(its))
        assert maps[-1] > maps[0]
        assert all(b >= a for a, b in zip(maps[:21], maps[1:21]))

    def test_missing_labels(self, tmp_path):
        rng = np.random.default_rng(0)
        g = from_arrays(rng.normal(size=(4, 3)), [0, 0, 1, 1])
        q = from_arrays(rng.normal(size=(1, 3)), [5], domain="A", prefix="q")
        save_embedding_set(g, tmp_path / "g.json")
        save_embedding_set(q, tmp_path / "q.json")
        code = run("trace", "--gallery", tmp_path / "g.json", "--queries", tmp_path / "q.json",
                   "--out", tmp_path / "t.csv")
        assert code == EXIT_DATA
        assert not (tmp_path / "t.csv").exists()


class TestErrors:
    def test_missing_manifest(self, tmp_path):
        code = run("rerank", "--gallery", tmp_path / "nope.json", "--queries", tmp_path / "nope.json",
                   "--out", tmp_path / "r.csv", "--trace-out", tmp_path / "t.csv")
        assert code == EXIT_IO
        assert list(tmp_path.iterdir()) == []

    def test_bad_flag_value(self, synth_dir, tmp_path):
        assert run("rerank", *pair(synth_dir), "--beta", -1, "--out", tmp_path / "r.csv") == EXIT_USAGE
        assert run("rerank", *pair(synth_dir), "--m", "zero", "--out", tmp_path / "r.csv") == EXIT_USAGE
        assert not (tmp_path / "r.csv").exists()

    def test_unknown_flag(self, tmp_path):
        assert run("rank", "--bogus") == EXIT_USAGE

    def test_bad_synth_spec(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"n_classes": 2, "per_class_gallery": 2,
                                                     "per_class_queries": 1, "dim": 1}))
        assert run("gen-synth", "--spec", tmp_path / "s.json", "--out-dir", tmp_path / "o") == EXIT_DATA

    def test_synth_spec_file(self, tmp_path):
        spec = SynthSpec(3, 4, 1, dim=6, seed=9)
        (tmp_path / "s.json").write_text(json.dumps(spec.to_dict()))
        assert run("gen-synth", "--spec", tmp_path / "s.json", "--out-dir", tmp_path / "o") == EXIT_OK
        manifest = json.loads((tmp_path / "o" / "gallery.json").read_text())
        assert manifest["count"] == 12 and manifest["dim"] == 6


class TestGradcheck:
    @pytest.mark.parametrize("mode", ["on", "off"])
    def test_passes(self, mode, capsys):
        assert run("gradcheck", "--seed", 3, "--softmax", mode) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["pass"] and out["max_relative_error"] < 1e-4

    def test_impossible_tolerance(self, capsys):
        assert run("gradcheck", "--tol", 0) == EXIT_CHECK_FAILED


class TestLossEval:
    def batch(self, tmp_path, **extra):
        rng = np.random.default_rng(5)
        data = {
            "embeddings_a": rng.normal(size=(4, 3)).tolist(),
            "embeddings_b": rng.normal(size=(4, 3)).tolist(),
            "labels_a": [0, 0, 1, 1],
            "labels_b": [0, 1, 0, 1],
            "logits_a": np.zeros((4, 2)).tolist(),
            **extra,
        }
        path = tmp_path / "batch.json"
        path.write_text(json.dumps(data))
        return path

    def test_breakdown(self, tmp_path, capsys):
        path = self.batch(tmp_path)
        assert run("loss-eval", "--batch", path, "--weights", '{"triplet": 1, "cad": 0, "ce": 1}') == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["ce"] == pytest.approx(np.log(2))
        assert out["total"] == pytest.approx(out["triplet"] + out["ce"])

    def test_missing_features(self, tmp_path):
        assert run("loss-eval", "--batch", self.batch(tmp_path)) == EXIT_DATA

    def test_unknown_weight(self, tmp_path):
        assert run("loss-eval", "--batch", self.batch(tmp_path), "--weights", '{"foo": 1}') == EXIT_USAGE

    def test_missing_file(self, tmp_path):
        assert run("loss-eval", "--batch", tmp_path / "none.json") == EXIT_IO
