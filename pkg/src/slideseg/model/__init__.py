from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .decoder import NUM_HYPOTHESES, MaskDecoder
from .encoder import EncoderConfig, ImageEncoder
from .lora import LoraLinear, lora_forward
from .network import PromptableSegmenter, create_model, window_to_tensor
from .prompt_encoder import PromptEncoder

__all__ = [
    "EncoderConfig",
    "FORMAT_VERSION",
    "ImageEncoder",
    "LoraLinear",
    "MaskDecoder",
    "NUM_HYPOTHESES",
    "PromptEncoder",
    "PromptableSegmenter",
    "create_model",
    "load_checkpoint",
    "lora_forward",
    "save_checkpoint",
    "window_to_tensor",
]
