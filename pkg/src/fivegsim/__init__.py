"""Deterministic desk-scale mobile core simulator.

One package, four layers: wire formats (`wirefmt`), the event fabric
(`simnet`), the network functions (`core_cp`, `user_plane`, `ran_ue`,
`nwdaf`) and the scenario drivers (`runner`, `validation`, `cli`). A
(topology, scenario, seed) triple fully determines every packet.
"""

from .config import (
    ConfigError,
    Params,
    ScenarioSpec,
    TopologyConfig,
    default_topology,
    load_topology,
    parse_topology,
    with_link_loss,
    with_second_gnb,
)
from .errors import FivegsimError, FlowError, SetupError
from .nwdaf import (
    EventStore,
    NwdafEvent,
    SchemaError,
    export_events,
    import_events,
    kpi_packet_counts,
    kpi_throughput_matrix,
)
from .runner import RunResult, Testbed, run_reliability_measurement, run_scenario
from .simnet import (
    DELIVERED,
    DROPPED,
    ELIMINATED_DUPLICATE,
    Link,
    Network,
    SimNetError,
    TapRecord,
)
from .urllc import (
    DedupWindow,
    Redundancy,
    ReliabilityResult,
    eliminate_duplicates,
    measure_delivery_reliability,
    seq_newer,
)
from .validation import CheckResult, all_passed, validate_sequences
from .wirefmt import (
    GtpuHeader,
    Protocol,
    SimPacket,
    WireFormatError,
    decode_gtpu_header,
    decode_packet,
    encode_gtpu_header,
    encode_packet,
    gtpu_decapsulate,
    gtpu_encapsulate,
)

__version__ = "0.1.0"

__all__ = [
    "CheckResult",
    "ConfigError",
    "DELIVERED",
    "DROPPED",
    "DedupWindow",
    "ELIMINATED_DUPLICATE",
    "EventStore",
    "FivegsimError",
    "FlowError",
    "GtpuHeader",
    "Link",
    "Network",
    "NwdafEvent",
    "Params",
    "Protocol",
    "Redundancy",
    "ReliabilityResult",
    "RunResult",
    "ScenarioSpec",
    "SchemaError",
    "SetupError",
    "SimNetError",
    "SimPacket",
    "TapRecord",
    "Testbed",
    "TopologyConfig",
    "WireFormatError",
    "all_passed",
    "decode_gtpu_header",
    "decode_packet",
    "default_topology",
    "eliminate_duplicates",
    "encode_gtpu_header",
    "encode_packet",
    "export_events",
    "gtpu_decapsulate",
    "gtpu_encapsulate",
    "import_events",
    "kpi_packet_counts",
    "kpi_throughput_matrix",
    "load_topology",
    "measure_delivery_reliability",
    "parse_topology",
    "run_reliability_measurement",
    "run_scenario",
    "seq_newer",
    "validate_sequences",
    "with_link_loss",
    "with_second_gnb",
]
