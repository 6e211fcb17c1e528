import os
import shutil

import numpy as np
import pytest

from conftest import random_policy, random_table
from crlhf.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from crlhf.core import PreferenceDataset
from crlhf.exceptions import ValidationError
from crlhf.io import (ingest_external, read_features, read_kv, read_policy, read_preferences,
                      read_thetas, write_features, write_kv, write_policy, write_preferences,
                      write_thetas)
from crlhf.mle import BradleyTerryMLE, fit_mle

DATA = os.path.join(os.path.dirname(__file__), "data")


def _golden(name):
    return os.path.join(DATA, f"golden_{name}.csv")


def test_round_trip_bit_identical(tmp_path, rng):
    table = random_table(rng, 3, 4, 5)
    pi = random_policy(rng, 3, 4)
    thetas = rng.standard_normal((2, 5)) * np.array([1e-300, 1e300, np.pi, -0.1, 1 / 3])
    ds = PreferenceDataset([0, 2, 1], [1, 3, 0], [2, 0, 3], [[1, 0], [0, 0], [1, 1]])
    write_features(tmp_path / "f.csv", table, ["test"])
    write_policy(tmp_path / "p.csv", pi)
    write_thetas(tmp_path / "t.csv", thetas)
    write_preferences(tmp_path / "y.csv", ds)
    np.testing.assert_array_equal(read_features(tmp_path / "f.csv").features, table.features)
    np.testing.assert_array_equal(read_policy(tmp_path / "p.csv").probs, pi.probs)
    np.testing.assert_array_equal(read_thetas(tmp_path / "t.csv"), thetas)
    back = read_preferences(tmp_path / "y.csv")
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.actions2, ds.actions2)
    assert (tmp_path / "f.csv").read_text().startswith("# test\n")


def test_kv_round_trip(tmp_path):
    write_kv(tmp_path / "a.kv", {"x": 0.1, "flag": True, "lst": [1.5, 2.0], "skip": None})
    kv = read_kv(tmp_path / "a.kv")
    assert kv == {"x": "0.10000000000000001", "flag": "true", "lst": "1.5,2"}
    (tmp_path / "b.kv").write_text("# c\nnovalue\n")
    with pytest.raises(ValidationError, match="b.kv:2"):
        read_kv(tmp_path / "b.kv")


def test_golden_ingestion_matches_direct_fit():
    table, ds, pi0 = ingest_external(_golden("features"), _golden("preferences"), _golden("reference"))
    assert len(ds) == 3 and ds.num_oracles == 2
    np.testing.assert_allclose(pi0.probs, [[0.25, 0.75], [0.5, 0.5]])
    deltas = np.array([[1.2, 0.8], [0.5, -1.5], [-1.2, -0.8]])
    np.testing.assert_allclose(ds.deltas(table), deltas, atol=1e-15)
    direct = BradleyTerryMLE().fit(deltas, [0, 1, 0]).coef_
    np.testing.assert_allclose(fit_mle(ds, table, 1).theta_hat, direct, atol=1e-12)
    _, _, uniform = ingest_external(_golden("features"), _golden("preferences"))
    np.testing.assert_array_equal(uniform.probs, 0.5)


def test_policy_row_error_names_prompt(tmp_path):
    (tmp_path / "p.csv").write_text("prompt,action,prob\n0,0,0.5\n0,1,0.5\n1,0,0.49\n1,1,0.49\n")
    with pytest.raises(ValidationError, match="prompt 1"):
        read_policy(tmp_path / "p.csv")


def test_parse_error_reports_line(tmp_path):
    (tmp_path / "f.csv").write_text("# c\nprompt,action,f0\n0,0,0.1\n0,1,abc\n")
    with pytest.raises(ValidationError, match=r"f\.csv:4"):
        read_features(tmp_path / "f.csv")
    (tmp_path / "g.csv").write_text("prompt,action,f0\n0,0,0.1\n1,1,0.2\n")
    with pytest.raises(ValidationError, match="missing entry"):
        read_features(tmp_path / "g.csv")
    (tmp_path / "y.csv").write_text("prompt,action1,action2,y1,y2\n0,0,1,2,0\n")
    with pytest.raises(ValidationError, match="y.csv:2"):
        read_preferences(tmp_path / "y.csv")


def test_renormalize_switch(tmp_path):
    (tmp_path / "f.csv").write_text("prompt,action,f0,f1\n0,0,3,4\n0,1,0.1,0\n")
    with pytest.warns(UserWarning, match="rescaling 1"):
        t = read_features(tmp_path / "f.csv")
    np.testing.assert_allclose(t.features[0, 0], [0.6, 0.8])
    with pytest.raises(ValidationError):
        read_features(tmp_path / "f.csv", renormalize=False)


def test_preferences_out_of_range(tmp_path):
    (tmp_path / "y.csv").write_text("prompt,action1,action2,y1,y2\n0,0,5,1,0\n")
    with pytest.raises(ValidationError):
        ingest_external(_golden("features"), tmp_path / "y.csv")


# -------------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    small = ["--num-prompts", "6", "--num-actions", "3", "--dim", "3", "--N", "400", "--eta", "0.3",
             "--eta0", "1.0"]
    dirs = {k: str(root / k) for k in ("gen", "fit", "solve", "solve2", "cert", "eval")}
    assert main(["generate", "--out", dirs["gen"], "--seed", "4"] + small) == EXIT_OK
    assert main(["fit", "--config", os.path.join(dirs["gen"], "manifest.kv"), "--out", dirs["fit"]]) == EXIT_OK
    solve = ["solve", "--config", os.path.join(dirs["fit"], "manifest.kv"), "--iterations-T", "200"]
    assert main(solve + ["--out", dirs["solve"]]) == EXIT_OK
    assert main(solve + ["--out", dirs["solve2"]]) == EXIT_OK
    cfg = os.path.join(dirs["solve"], "manifest.kv")
    assert main(["certify", "--config", cfg, "--out", dirs["cert"], "--fallback-R", "50"]) == EXIT_OK
    assert main(["evaluate", "--config", cfg, "--out", dirs["eval"]]) == EXIT_OK
    return dirs


def test_chain_outputs(chain):
    for name in ("features.csv", "preferences.csv", "reference.csv", "truth.csv", "manifest.kv"):
        assert os.path.exists(os.path.join(chain["gen"], name))
    first = open(os.path.join(chain["solve"], "trace.csv")).readline()
    assert first == "# manifest: manifest.kv\n"
    man = read_kv(os.path.join(chain["solve"], "manifest.kv"))
    assert man["command"] == "solve" and man["iterations_T"] == "200" and "version_numpy" in man
    assert "truth" in man  # carried forward from generate


def test_solve_deterministic(chain):
    for name in ("trace.csv", "policy.csv", "solution.kv", "manifest.kv"):
        a = open(os.path.join(chain["solve"], name)).read()
        b = open(os.path.join(chain["solve2"], name)).read()
        assert a == b


def test_certificate_fields_present(chain):
    cert = read_kv(os.path.join(chain["cert"], "certificate.kv"))
    for key in ("beta_N", "min_eig", "zeta_min", "Lambda", "R", "thm2_dual_gap",
                "thm2_violation", "thm2_primal_gap", "failure_probability", "slater_certified"):
        assert cert[key] != ""
    metrics = read_kv(os.path.join(chain["eval"], "metrics.kv"))
    assert float(metrics["suboptimality"]) >= -1e-9


def test_exit_codes(tmp_path, capsys):
    assert main(["fit", "--features", str(tmp_path / "none.csv"), "--preferences", _golden("preferences"),
                 "--out", str(tmp_path / "o")]) == EXIT_IO
    assert main(["solve", "--features", _golden("features"), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    bad = tmp_path / "bad.kv"
    bad.write_text("eta = -1\nj_min = 0\n")
    shutil.copy(_golden("features"), tmp_path / "f.csv")
    (tmp_path / "t.csv").write_text("oracle,t0,t1\n0,1,0\n1,0,1\n")
    assert main(["solve", "--config", str(bad), "--features", str(tmp_path / "f.csv"),
                 "--thetas", str(tmp_path / "t.csv"), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert main(["solve", "--features", str(tmp_path / "f.csv"), "--thetas", str(tmp_path / "t.csv"),
                 "--j-min", "0", "--eta", "abc", "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "crlhf:" in capsys.readouterr().err


def test_relative_paths_in_config(tmp_path):
    shutil.copy(_golden("features"), tmp_path / "f.csv")
    shutil.copy(_golden("preferences"), tmp_path / "y.csv")
    (tmp_path / "run.kv").write_text("features = f.csv\npreferences = y.csv\n")
    out = tmp_path / "fit"
    assert main(["fit", "--config", str(tmp_path / "run.kv"), "--out", str(out)]) == EXIT_OK
    assert read_thetas(out / "thetas.csv").shape == (2, 2)


def test_sweep_preset_with_override(tmp_path):
    out = tmp_path / "sw"
    args = ["sweep", "--preset", "convergence", "--out", str(out), "--num-prompts", "8",
            "--num-actions", "3", "--dim", "3", "--seeds", "0,1", "--N-grid", "0,200",
            "--iterations-T", "50", "--eta0", "1.0"]
    assert main(args) == EXIT_OK
    lines = [ln for ln in open(out / "sweep.csv") if not ln.startswith("#")]
    assert len(lines) == 1 + 3 * 2 * 2
    long = [ln for ln in open(out / "sweep_long.csv") if not ln.startswith("#")]
    assert long[0].strip() == "w,N,metric,mean,stderr,n_seeds" and len(long) == 1 + 2 * 3 * 2
    man = read_kv(out / "manifest.kv")
    assert man["eta"] == "0.050000000000000003" and man["ws"] == "0.29999999999999999,0.59999999999999998,0.90000000000000002"
