"""Harness for tool-assisted, region-scoped kernel optimization with verifiable rewards."""

__version__ = "0.1.0"

from .evaluation import EvalConfig, EvalReport, KernelResult, TimingComparison, run_ablation, run_suite, speedup
from .executor import Executor, Job, JobOutcome, RunReport, parse_run_protocol
from .policy import (
    FinalAnswer,
    MalformedToolCall,
    Message,
    ReasoningText,
    RecordingPolicy,
    RemotePolicy,
    ReplayPolicy,
    ScriptedPolicy,
    ToolCallRequest,
)
from .problem import (
    KernelSpan,
    OptimizationTask,
    RegionOfInterest,
    expand_kernel_regions,
    filter_runnable,
    load_task,
    measure_baseline,
    sample_tool_subset,
    save_task,
    synth_generate,
)
from .reward import RewardBreakdown, group_advantages, perf_reward, tool_reward, total_reward
from .rollout import (
    RolloutGroup,
    SFTRecord,
    TrainingRecord,
    distill_filter,
    export_training_batch,
    run_rollout,
    run_rollout_group,
)
from .tools import ALL_TOOLS, BenchmarkOutcome, CompilerDiagnostics, ToolCall, ToolName, ToolResult, dispatch
from .trace import FinalSolution, Trace, parse, serialize, unique_tools_used, validate_final
