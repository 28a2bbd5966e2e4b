"""Capability-oriented fuzzing and failure attribution for a modular grid navigation agent."""
from .agent import (
    Capability,
    EpisodeSettings,
    EpisodeTrace,
    ReferenceAgent,
    reference_agent,
    run_episode,
)
from .attribution import AttributionResult, attribute, intervene, repair
from .faults import FaultConfig, FaultSpec, FaultType, wrap_with_faults
from .fuzzer import CampaignConfig, Variant, load_config, run_campaign
from .instruction import TaskInstruction, generate_instruction, mutate
from .kernels import BACKEND
from .oracles import CapabilityError, OracleConfig, detect_errors
from .world import Scene, SceneParams, generate_scene

__version__ = "0.1.0"

__all__ = [
    "AttributionResult",
    "BACKEND",
    "CampaignConfig",
    "Capability",
    "CapabilityError",
    "EpisodeSettings",
    "EpisodeTrace",
    "FaultConfig",
    "FaultSpec",
    "FaultType",
    "OracleConfig",
    "ReferenceAgent",
    "Scene",
    "SceneParams",
    "TaskInstruction",
    "Variant",
    "attribute",
    "detect_errors",
    "generate_instruction",
    "generate_scene",
    "intervene",
    "load_config",
    "mutate",
    "reference_agent",
    "repair",
    "run_campaign",
    "run_episode",
    "wrap_with_faults",
]
