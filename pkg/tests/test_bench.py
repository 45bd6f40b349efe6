import csv
import json

import numpy as np
import pytest

from nvmesr import cli
from nvmesr.bench import CSV_COLUMNS, ExperimentSpec, Problem, ledger_matches, run_experiments
from nvmesr.cluster import ClusterConfig, simulate
from nvmesr.errors import InvalidConfigError
from nvmesr.ledger import account, in_memory_to_nvm
from nvmesr.pcg import SolveConfig


def test_account_formulas():
    led = account(400, 4, 3, "esr_inmem")
    assert led.ram_redundancy_values == 2 * 4 * 400 == 3200
    assert led.ram_redundancy_bytes == 16 * 400 * 3
    assert led.ram_compute_bytes == 8 * (7 * 400 + 4 * 400)
    assert account(400, 4, 0, "none").ram_redundancy_values == 0
    nvm = account(320_000_000, 64, 1, "nvm_prd")
    assert nvm.nvm_written_values_per_persist == 320_000_000
    assert nvm.nvm_written_bytes_per_persist == 2.56e9
    assert nvm.ram_redundancy_bytes == 0


def test_full_tolerance_extrapolation_to_nvm():
    proc = 10**6
    n = 3 * 10**15 // (16 * proc)  # full-tolerance in-memory redundancy of 3 PB
    inmem = account(n, proc, proc - 1, "esr_inmem")
    assert 8 * inmem.ram_redundancy_values == 3 * 10**15
    nvm = account(n, proc, 1, "nvm_prd")
    assert nvm.nvm_resident_bytes == in_memory_to_nvm(8 * inmem.ram_redundancy_values, proc) == 3 * 10**9


@pytest.mark.parametrize("mode", ["none", "esr_inmem", "nvm_local", "nvm_prd"])
@pytest.mark.parametrize("proc", [2, 5])
def test_measured_ledger_equals_account(poisson8, mode, proc):
    c = proc - 1 if mode == "esr_inmem" else 1
    rep = simulate(poisson8, np.ones(512), SolveConfig(recovery_mode=mode, c=c, persist_period=3),
                   ClusterConfig(proc=proc))
    assert ledger_matches(rep.ledger, account(512, proc, c, mode, nnz=poisson8.nnz)) == []


def test_trends():
    n = 4096
    inmem = [account(n, p, p - 1, "esr_inmem") for p in (2, 4, 8, 16)]
    assert all(a.ram_redundancy_bytes < b.ram_redundancy_bytes for a, b in zip(inmem, inmem[1:]))
    wires = [led.wire_bytes_per_persist for led in inmem]
    assert all(a < b for a, b in zip(wires, wires[1:]))
    for led, p in zip(inmem, (2, 4, 8, 16)):
        assert led.wire_bytes_per_persist == 8 * (p - 1) * (n + p)  # linear in the holder count
    nvm = {account(n, p, 1, "nvm_prd").nvm_written_bytes_per_persist for p in (2, 4, 8, 16)}
    assert nvm == {8 * n}
    prd_c = {account(n, 8, c, "nvm_prd").wire_bytes_per_persist for c in range(8)}
    assert len(prd_c) == 1


def test_spec_validation(tmp_path):
    with pytest.raises(InvalidConfigError):
        ExperimentSpec.from_dict({"grid": [4, 4], "procs": [2], "backends": ["none"]})
    with pytest.raises(InvalidConfigError):
        ExperimentSpec.from_dict({"grid": [4, 4, 4], "procs": [2], "backends": ["raid"]})
    with pytest.raises(InvalidConfigError):
        ExperimentSpec.from_dict({"grid": [4, 4, 4], "procs": [2], "backends": ["none"], "color": 1})
    p = tmp_path / "s.json"
    p.write_text("{not json")
    with pytest.raises(InvalidConfigError):
        ExperimentSpec.load(p)


def _spec(tmp_path, **kw):
    d = {"grid": [6, 6, 6], "procs": [2, 4], "backends": ["none", "esr_inmem", "nvm_local", "nvm_prd"],
         "c": "full", "persist_period": 3, "seed": 1}
    d.update(kw)
    return ExperimentSpec.from_dict(d)


def test_crash_free_matrix_same_iterations(tmp_path):
    path = run_experiments(_spec(tmp_path), tmp_path / "out")
    rows = list(csv.DictReader(path.open()))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 8
    assert len({r["iter_converge"] for r in rows}) == 1
    assert all(r["status"] == "converged" for r in rows)


def test_csv_byte_identical_on_rerun(tmp_path):
    spec = _spec(tmp_path, faults=["5:compute:1"], trials=2)
    a = run_experiments(spec, tmp_path / "a").read_bytes()
    b = run_experiments(spec, tmp_path / "b").read_bytes()
    assert a == b


def test_infeasible_rows_are_skipped(tmp_path):
    spec = _spec(tmp_path, procs=[1, 2], c=1, faults=["4:mid_persist@10:0"])
    rows = list(csv.DictReader(run_experiments(spec, tmp_path).open()))
    by = {(r["backend"], r["proc"]): r["status"] for r in rows}
    assert by[("esr_inmem", "1")].startswith("skipped:")
    assert by[("esr_inmem", "2")].startswith("skipped:")  # mid_persist needs NVM
    assert by[("nvm_prd", "2")] == "converged"


def test_problem_rhs():
    a = Problem.poisson(2, 2, 2, rhs="random", seed=4)
    b = Problem.poisson(2, 2, 2, rhs="random", seed=4)
    assert np.array_equal(a.b, b.b) and not np.array_equal(a.b, np.ones(8))
    with pytest.raises(InvalidConfigError):
        Problem.poisson(2, 2, 2, rhs="zeros")


# command line -----------------------------------------------------------------

def test_cli_gen_and_solve_matrix(tmp_path, capsys):
    out = tmp_path / "p.mtx"
    assert cli.main(["gen", "3", "3", "3", str(out)]) == 0
    A = cli.read_matrix_market(out)
    assert A.n_rows == 27 and A.is_symmetric()
    assert cli.main(["solve", "--matrix", str(out), "--proc", "3"]) == 0
    assert "converged" in capsys.readouterr().out


def test_cli_solve_with_fault_and_report(tmp_path, capsys):
    rep = tmp_path / "r.jsonl"
    code = cli.main(["solve", "--backend", "nvm_prd", "--proc", "4", "--c", "1", "--period", "5",
                     "--fault", "9:compute:2", "--report", str(rep)])
    out = capsys.readouterr().out
    assert code == 0 and "rolled back to j=6" in out and "simulated units" in out
    lines = [json.loads(line) for line in rep.read_text().splitlines()]
    assert lines[-1]["status"] == "converged"


@pytest.mark.parametrize("argv,code", [
    (["solve", "--backend", "esr_inmem", "--c", "1", "--fault", "9:compute:1,2"], 2),
    (["solve", "--backend", "esr_inmem", "--fault", "11:mid_persist@3:1"], 3),
    (["solve", "--proc", "4", "--c", "4", "--backend", "nvm_prd"], 3),
    (["solve", "--backend", "esr_inmem", "--c", "3", "--mv", "1000"], 2),
    (["account", "--n", "10", "--proc", "2", "--c", "5", "--mode", "esr_inmem"], 3),
])
def test_cli_exit_codes(argv, code, capsys):
    assert cli.main(argv) == code


def test_cli_account(capsys):
    assert cli.main(["account", "--n", "400", "--proc", "4", "--mode", "esr_inmem"]) == 0
    assert json.loads(capsys.readouterr().out)["ram_redundancy_values"] == 3200


def test_cli_bench(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"grid": [4, 4, 4], "procs": [2], "backends": ["none", "nvm_prd"]}))
    assert cli.main(["bench", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "results.csv").exists()
    bad = tmp_path / "bad.json"
    bad.write_text("[]")
    assert cli.main(["bench", "--spec", str(bad), "--out", str(tmp_path)]) == 3
