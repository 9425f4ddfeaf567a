"""Greedy FIFO matchmaking.

Jobs are considered strictly in ``(submit_time, job_id)`` order.  Each job
takes the eligible unclaimed machine with the highest rank, ties broken by
the smallest ``vm_id``; a taken machine is unavailable to later jobs in the
same pass.  Jobs with no eligible machine are skipped and the pass moves on.

A machine is eligible for a job when the job's ``requirements`` evaluate to
true and, if the machine carries a ``requirements`` attribute of its own
(expression text), that evaluates to true as well.  Both are evaluated with
``job.`` bound to the job and ``machine.`` bound to the machine.  A rank that
is missing, UNDEFINED or non-numeric counts as 0.

Large clusters are mostly identical slots, so machines are grouped by their
attribute values and each (job-signature, group) pair is evaluated once per
pass.  The result is identical to evaluating every pair.
"""

from __future__ import annotations

from collections import deque
from typing import Any, Iterable, Mapping, Optional

from .expr import Attr, Binary, Expression, ExpressionSyntaxError, Unary, compile_expression, is_true, parse_expression
from .model import JobRecord, MachineRecord, VmId

__all__ = ["find_matches", "eligible", "rank_value", "machine_requirements"]

MACHINE_REQUIREMENTS_ATTR = "requirements"


def _job_refs(expr: Optional[Expression], out: set) -> None:
    if expr is None:
        return
    if isinstance(expr, Attr):
        if expr.scope == "job":
            out.add(expr.name)
    elif isinstance(expr, Unary):
        _job_refs(expr.operand, out)
    elif isinstance(expr, Binary):
        _job_refs(expr.left, out)
        _job_refs(expr.right, out)


def machine_requirements(machine: MachineRecord) -> Optional[Expression]:
    text = machine.attributes.get(MACHINE_REQUIREMENTS_ATTR)
    if not isinstance(text, str):
        return None
    try:
        return parse_expression(text)
    except ExpressionSyntaxError:
        # A machine that publishes garbage accepts nothing.
        return parse_expression("false")


def rank_value(job: JobRecord, job_attrs: Mapping[str, Any], machine_attrs: Mapping[str, Any]) -> float:
    if job.rank is None:
        return 0.0
    v = compile_expression(job.rank)(job_attrs, machine_attrs)
    if type(v) is int or type(v) is float:
        return float(v)
    return 0.0


def eligible(job: JobRecord, machine: MachineRecord, job_attrs=None) -> bool:
    """Pairwise eligibility; the definition the grouped pass must agree with."""
    job_attrs = job.evaluation_attrs() if job_attrs is None else job_attrs
    m_attrs = machine.attributes
    if not is_true(compile_expression(job.requirements)(job_attrs, m_attrs)):
        return False
    m_req = machine_requirements(machine)
    return m_req is None or is_true(compile_expression(m_req)(job_attrs, m_attrs))


def _signature(attrs: Mapping[str, Any]) -> tuple:
    # The type goes in too: 1, 1.0 and True hash alike but evaluate differently.
    return tuple(sorted((k, type(v).__name__, v) for k, v in attrs.items()))


class _Group:
    __slots__ = ("sig", "sample", "free")

    def __init__(self, sig, sample: MachineRecord):
        self.sig = sig
        self.sample = sample
        self.free: deque[VmId] = deque()


def find_matches(
    idle_jobs: Iterable[JobRecord],
    unclaimed: Iterable[MachineRecord],
    presorted: bool = False,
) -> list[tuple[int, VmId]]:
    """One greedy pass; returns ``(job_id, vm_id)`` pairs in assignment order.

    ``idle_jobs`` is consumed lazily when ``presorted`` is true (the store's
    idle index is already in FIFO order) and the pass stops as soon as every
    machine is taken.
    """
    machines = sorted(unclaimed, key=lambda m: m.vm_id)
    if not machines:
        return []
    jobs = idle_jobs if presorted else sorted(idle_jobs, key=lambda j: (j.submit_time, j.job_id))

    groups: dict[tuple, _Group] = {}
    for m in machines:
        sig = _signature(m.attributes)
        g = groups.get(sig)
        if g is None:
            g = groups[sig] = _Group(sig, m)
        g.free.append(m.vm_id)
    live = list(groups.values())
    remaining = len(machines)

    # Job attributes that any machine-side requirement might read.
    machine_side_refs: set = set()
    for g in live:
        _job_refs(machine_requirements(g.sample), machine_side_refs)

    cache: dict[tuple, tuple[bool, float]] = {}
    out: list[tuple[int, VmId]] = []
    for job in jobs:
        if remaining == 0:
            break
        job_attrs = job.evaluation_attrs()
        refs = set(machine_side_refs)
        _job_refs(job.requirements, refs)
        _job_refs(job.rank, refs)
        job_key = (
            job.requirements,
            job.rank,
            tuple((name, type(job_attrs.get(name)).__name__, job_attrs.get(name)) for name in sorted(refs)),
        )
        best: Optional[_Group] = None
        best_rank = 0.0
        for g in live:
            if not g.free:
                continue
            key = (job_key, g.sig)
            hit = cache.get(key)
            if hit is None:
                ok = eligible(job, g.sample, job_attrs)
                hit = cache[key] = (ok, rank_value(job, job_attrs, g.sample.attributes) if ok else 0.0)
            ok, r = hit
            if not ok:
                continue
            if best is None or r > best_rank or (r == best_rank and g.free[0] < best.free[0]):
                best, best_rank = g, r
        if best is None:
            continue
        out.append((job.job_id, best.free.popleft()))
        remaining -= 1
        if remaining == 0:
            break
        if not best.free:
            live = [g for g in live if g.free]
    return out
