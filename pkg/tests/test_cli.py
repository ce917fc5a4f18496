import csv
import json

import pytest

from slasched import experiments as ex
from slasched.cli import main


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def fix1_file(tmp_path):
    p = tmp_path / "fix1.csv"
    p.write_text("arrival_time_s,template_id,raw_latency_s\n0,2,\n0,1,\n0,2,\n0,2,\n")
    return p


def test_schedule_ffi_three_vms(tmp_path, fix1_file):
    out = tmp_path / "s.csv"
    assert main(["schedule", str(fix1_file), "--config", "fix1", "--goal", "perquery",
                 "--method", "ffi", "--out", str(out)]) == 0
    r = rows(out)
    assert len({x["vm_index"] for x in r}) == 3 and len(r) == 4
    assert list(r[0]) == ["vm_index", "vm_type", "position", "query", "template_id", "start_s", "finish_s"]


def test_train_is_deterministic(tmp_path, fix1_file):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    args = ["train", "--config", "fix1", "--goal", "perquery", "--samples", "40", "--queries", "5",
            "--seed", "4"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    s = tmp_path / "s.csv"
    assert main(["schedule", str(fix1_file), "--config", "fix1", "--strategy", str(a), "--out", str(s)]) == 0
    assert len(rows(s)) == 4
    tight = tmp_path / "t.json"
    goal = json.dumps({"variant": "perquery", "params": {"deadlines_s": {"1": 150, "2": 60}}})
    assert main(["adapt", str(a), "--config", "fix1", "--goal", goal, "--out", str(tight)]) == 0
    assert json.loads(tight.read_text())["goal"]["variant"] == "perquery"
    assert main(["adapt", str(a), "--config", "fix1", "--goal", "perquery:1.2"]) == 2


def test_exit_codes(tmp_path, fix1_file):
    assert main(["schedule", str(fix1_file), "--config", str(tmp_path / "missing.json"),
                 "--goal", "max:9"]) == 2
    assert main(["schedule", str(fix1_file), "--config", "fix1", "--goal", "bogus"]) == 2
    assert main(["schedule", str(fix1_file), "--config", "fix1", "--goal", "max:100",
                 "--method", "optimal", "--max-expanded", "2"]) == 4
    bad = tmp_path / "bad.csv"
    bad.write_text("arrival_time_s,template_id\n0,7\n")
    assert main(["schedule", str(bad), "--config", "fix1", "--goal", "max:100", "--method", "ffd"]) == 3


def test_gen(tmp_path):
    p = tmp_path / "w.csv"
    assert main(["gen", "-n", "0", "--out", str(p)]) == 0
    assert rows(p) == []
    assert main(["gen", "-n", "2000", "--skew", "0", "--seed", "1", "--out", str(p)]) == 0
    ids = [int(r["template_id"]) for r in rows(p)]
    n, k = 2000, 4
    sd = (n * (1 / k) * (1 - 1 / k)) ** 0.5
    assert all(abs(ids.count(t) - n / k) <= 3 * sd for t in range(1, 5))
    assert main(["gen", "-n", "500", "--skew", "1", "--seed", "1", "--out", str(p)]) == 0
    ids = [int(r["template_id"]) for r in rows(p)]
    assert max(ids.count(t) for t in set(ids)) >= 0.95 * len(ids)
    assert main(["gen", "-n", "2", "--skew", "0.999", "--out", str(p)]) == 2


def test_gen_chi2_low_confidence_at_zero_skew():
    import random
    cat = ex.desk_catalog()
    w = ex.skewed_workload(cat, 1000, 0.0, 3)
    counts = [sum(q.template_id == t for q in w) for t in cat.template_ids]
    assert ex.chi2_confidence(ex.chi2_uniform(counts), 3) < 0.5
    c = ex.skewed_counts(1000, cat.template_ids, 0.9, random.Random(0))
    conf = ex.chi2_confidence(ex.chi2_uniform(list(c.values())), 3)
    assert abs(conf - 0.9) < 0.05


def test_chi2_cdf_reference_values():
    # upper 5% critical values for 1, 2 and 10 degrees of freedom
    for stat, dof in ((3.841459, 1), (5.991465, 2), (18.307038, 10)):
        assert ex.chi2_confidence(stat, dof) == pytest.approx(0.95, abs=1e-6)


def test_noise(tmp_path):
    src = tmp_path / "w.csv"
    main(["gen", "-n", "400", "--seed", "2", "--out", str(src)])
    same = tmp_path / "n0.csv"
    assert main(["noise", str(src), "--sigma", "0", "--out", str(same)]) == 0
    cat = ex.desk_catalog()
    assert all(ex.map_unknown(float(r["raw_latency_s"]), cat) == int(r["template_id"]) for r in rows(same))
    w = ex.skewed_workload(cat, 2000, 0.0, 0)
    r30 = ex.misassignment_rate(ex.perturb(w, cat, 0.30, 0), cat)
    r40 = ex.misassignment_rate(ex.perturb(w, cat, 0.40, 0), cat)
    assert r40 > r30 > 0


def test_bench_small(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--suite", "optimality", "--metrics", "max", "--samples", "30", "--queries", "5",
                 "--count", "2", "--size", "6", "--out", str(out)]) == 0
    r = rows(out / "optimality.csv")
    assert list(r[0]) == ex.COLUMNS
    assert {x["method"] for x in r} == {"optimal", "learned", "ffd", "ffi", "pack9"}


def test_online_cli(tmp_path):
    st = tmp_path / "st.json"
    main(["train", "--config", "fix1", "--goal", "max:600", "--samples", "30", "--queries", "4", "--out", str(st)])
    tr = tmp_path / "tr.csv"
    tr.write_text("arrival_time_s,template_id,raw_latency_s\n0,1,\n10,2,\n20,2,\n")
    out = tmp_path / "o.csv"
    assert main(["online", str(st), str(tr), "--config", "fix1", "--samples", "30", "--queries", "4",
                 "--out", str(out)]) == 0
    assert len(rows(out)) == 3


def test_recommend_cli(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["recommend", "--config", "fix1", "--goal", "max:600", "--samples", "20", "--queries", "4",
                 "--tiers", "3", "-k", "2", "--out", str(out), "--save-dir", str(tmp_path / "tiers")]) == 0
    assert len(rows(out)) == 2
    assert len(list((tmp_path / "tiers").glob("tier*.json"))) == 2
