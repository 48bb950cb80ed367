"""Language/task adapters and target-language-ready TA schedules on synthetic toy languages."""

from .adapters import Adapter, AdapterStack, adapter_forward, stack_forward, swap_la
from .encoder import Encoder, ModelConfig
from .training_tlr import Variant, build_variant, select_la

__version__ = "0.1.0"

__all__ = ["Adapter", "AdapterStack", "Encoder", "ModelConfig", "Variant", "adapter_forward",
           "build_variant", "select_la", "stack_forward", "swap_la"]
