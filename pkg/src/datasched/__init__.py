"""A data-centric batch cluster manager.

Job, machine, match and run state lives in a journaled transactional store;
node agents pull their work with periodic heartbeats, and a push-model
scheduler with a job throttle is included for comparison.  ``experiment``
drives both under a virtual clock or as separate processes over HTTP.
"""

from .expr import ExpressionSyntaxError, evaluate, parse_expression
from .model import HistoryKind, JobRecord, JobState, MachineRecord, MachineState, VmId
from .store import Store
from .service import SchedulerService, ServiceConfig
from .agent import AgentConfig, NodeAgent, PushAgent
from .baseline import Schedd, ThrottleState
from .workload import WorkloadSpec, generate_workload, ideal_throughput
from .metrics import MetricsSeries, compute_metrics
from .experiment import ScenarioConfig, run_experiment

__all__ = [
    "AgentConfig", "ExpressionSyntaxError", "HistoryKind", "JobRecord", "JobState", "MachineRecord",
    "MachineState", "MetricsSeries", "NodeAgent", "PushAgent", "ScenarioConfig", "Schedd",
    "SchedulerService", "ServiceConfig", "Store", "ThrottleState", "VmId", "WorkloadSpec",
    "compute_metrics", "evaluate", "generate_workload", "ideal_throughput", "parse_expression",
    "run_experiment",
]
__version__ = "0.1.0"
