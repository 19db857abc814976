"""Workload-graph construction, rewriting, and simulation for distributed training."""

from .collectives import (
    CollectiveAlgo,
    P2pPlan,
    PlanOp,
    analytical_time,
    check_plan,
    collective_instances,
    dataflow_check,
    expand,
    expand_collectives,
    wire_bytes,
)
from .errors import (
    CyclicGraphError,
    DeadlockError,
    FormatError,
    InconsistentGroupsError,
    InvalidGraphError,
    MissingShapeError,
    RankMismatchError,
    TrainsimError,
    UnknownOperatorError,
    UnresolvedReferenceError,
    UnsupportedAlgoTopologyError,
    UnsupportedComboError,
)
from .graph import (
    CollectiveKind,
    CollSpec,
    Dtype,
    Node,
    NodeKind,
    OpClass,
    P2pSpec,
    TensorMeta,
    Violation,
    WorkloadGraph,
    classify_op,
    compare_histograms,
    op_histogram,
    tensor_bytes,
    topo_order,
    validate_graph,
)
from .passes import (
    DEFAULT_BUCKET_CAP,
    DEFAULT_PREFETCH,
    bucket_allreduce,
    reorder_allgather,
    verify_pass_safety,
)
from .simulator import (
    CommMode,
    RankStats,
    SimOptions,
    SimReport,
    TraceEvent,
    critical_path,
    simulate,
)
from .synth import (
    PRESETS,
    FsdpMode,
    ModelConfig,
    ParallelConfig,
    Strategy,
    parse_parallel,
    synth_transformer,
)
from .topology import (
    Topology,
    TopologyKind,
    parse_bandwidth,
    parse_latency,
    parse_topology,
)
from .traceio import (
    DEFAULT_DEVICE,
    GRAPH_FORMAT_VERSION,
    RAW_FORMAT_VERSION,
    DeviceSpec,
    ProfileTable,
    RawExport,
    RawIrNode,
    analytical_duration,
    convert,
    dumps_graph,
    load_profile,
    op_flops,
    parse_raw_export,
    read_graph,
    read_graph_dir,
    read_raw_export,
    round_half_up_ns,
    write_graph,
    write_graph_dir,
    write_raw_export,
)

__version__ = "0.1.0"
