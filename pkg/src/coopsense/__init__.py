"""coopsense: deterministic multi-agent cooperative perception at desk scale.

Late (track-to-track) fusion across onboard sensors and V2X peers, a
bit-exact perception-message codec, a simulated broadcast channel, sensor
condition monitoring, and detection/tracking metrics, all driven by a
synthetic traffic simulator.
"""

__version__ = "0.1.0"

#: binary message layout version (header byte 2)
WIRE_VERSION = 1

#: bundled scenario file schema version
SCENARIO_SCHEMA_VERSION = 1

from .core import (  # noqa: F401,E402
    AgentPose,
    ClassDistribution,
    ObjectClass,
    Rng,
    SensorSource,
    Timestamp,
    TrackedObject,
    WORLD_FRAME,
    normalize_class_dist,
    wrap_heading,
)
