import itertools
import random

from datasched.expr import Binary, Literal, parse_expression
from datasched.matchmaker import eligible, find_matches, rank_value
from datasched.model import JobRecord, MachineRecord, VmId
from oracles import matchmaker_equivalence, oracle_matches, random_instance


def job(i, req="true", rank=None, t=0.0, **attrs):
    return JobRecord(i, "ann", 60.0, parse_expression(req), None if rank is None else parse_expression(rank), attrs,
                     submit_time=t)


def machine(host, slot, **attrs):
    return MachineRecord(VmId(host, slot), attrs)


def test_single_pair():
    assert find_matches([job(1)], [machine("h", 0)]) == [(1, VmId("h", 0))]


def test_no_jobs():
    assert find_matches([], [machine("h", i) for i in range(5)]) == []


def test_no_machines():
    assert find_matches([job(1)], []) == []


def test_fifo_by_submit_time():
    jobs = [job(2, t=2.0), job(1, t=1.0)]
    assert find_matches(jobs, [machine("h", 0)]) == [(1, VmId("h", 0))]
    # submit_time dominates job_id
    jobs = [job(1, t=5.0), job(2, t=1.0)]
    assert find_matches(jobs, [machine("h", 0)]) == [(2, VmId("h", 0))]


def test_rank_then_smallest_vm():
    ms = [machine("b", 0, memory_mb=512), machine("a", 1, memory_mb=2048), machine("a", 0, memory_mb=2048)]
    assert find_matches([job(1, rank="machine.memory_mb")], ms) == [(1, VmId("a", 0))]
    # UNDEFINED rank is 0, so the tie goes to the smallest vm_id
    assert find_matches([job(1, rank="machine.gpu")], ms) == [(1, VmId("a", 0))]
    assert find_matches([job(1, rank="-machine.memory_mb")], ms) == [(1, VmId("b", 0))]


def test_requirements_filter_and_skip():
    ms = [machine("h", 0, memory_mb=512), machine("h", 1, memory_mb=4096)]
    jobs = [job(1, "machine.memory_mb > 10000"), job(2, "machine.memory_mb >= 1024"), job(3)]
    assert find_matches(jobs, ms) == [(2, VmId("h", 1)), (3, VmId("h", 0))]


def test_machine_side_requirements():
    ms = [machine("h", 0, requirements='job.owner == "bo"'), machine("h", 1)]
    assert find_matches([job(1)], ms) == [(1, VmId("h", 1))]
    # unparsable machine policy accepts nothing
    assert not eligible(job(1), machine("h", 0, requirements="job.x =="))


def test_string_rank_counts_as_zero():
    assert rank_value(job(1, rank='"high"'), {}, {}) == 0.0


def _check_invariants(jobs, machines, out):
    by_id = {j.job_id: j for j in jobs}
    by_vm = {m.vm_id: m for m in machines}
    assert len({j for j, _ in out}) == len(out)
    assert len({v for _, v in out}) == len(out)
    for j, v in out:
        assert eligible(by_id[j], by_vm[v])


def test_exhaustive_orderings_small_instances():
    # Every input ordering of small instances gives the oracle's answer.
    rng = random.Random(7)
    for _ in range(60):
        jobs, machines = random_instance(rng, rng.randint(1, 4), rng.randint(1, 4))
        want = oracle_matches(jobs, machines)
        for jp in itertools.permutations(jobs):
            for mp in itertools.permutations(machines):
                got = find_matches(list(jp), list(mp))
                assert got == want
        _check_invariants(jobs, machines, want)


def test_random_instances_against_oracle():
    checked, mismatches = matchmaker_equivalence(2000, seed=99)
    assert checked >= 2000
    assert mismatches == []


def test_rank_scaling_keeps_choice():
    rng = random.Random(3)
    for _ in range(300):
        jobs, machines = random_instance(rng, 4, 4)
        base = find_matches(jobs, machines)
        for c in (2, 4, 0.5):
            scaled = [j if j.rank is None else JobRecord(j.job_id, j.owner, j.duration_s, j.requirements,
                                                          Binary("*", Literal(c), j.rank), j.attributes,
                                                          submit_time=j.submit_time) for j in jobs]
            assert find_matches(scaled, machines) == base


def test_deterministic():
    rng = random.Random(5)
    jobs, machines = random_instance(rng, 4, 4)
    assert repr(find_matches(jobs, machines)) == repr(find_matches(list(jobs), list(machines)))


def test_grouping_large_homogeneous_pool():
    ms = [machine(f"h{h:02d}", s, memory_mb=1024, arch="x86_64") for h in range(50) for s in range(4)]
    jobs = [job(i, 'machine.arch == "x86_64"', t=float(i)) for i in range(1, 301)]
    out = find_matches(jobs, ms)
    assert len(out) == 200
    assert out == oracle_matches(jobs, ms)


def test_presorted_lazy_iterator():
    jobs = [job(i, t=float(i)) for i in range(1, 6)]
    consumed = []

    def gen():
        for j in jobs:
            consumed.append(j.job_id)
            yield j
    out = find_matches(gen(), [machine("h", 0), machine("h", 1)], presorted=True)
    assert [j for j, _ in out] == [1, 2]
    assert consumed == [1, 2]
