from .encoder import ClipTextEncoder, TextEncoder, ToyTextEncoder, build_text_encoder
from .fusion import (CrossAttentionFusion, SoftPrompt, TextBranch, build_soft_prompt, encode_hard_prompt,
                     fuse_prototypes)
from .prompts import (FIXED_TEMPLATE, QUERY_TEMPLATE, HardPromptSet, HTTPChatClient, default_prompts,
                      generate_hard_prompts)

__all__ = [
    "ClipTextEncoder", "TextEncoder", "ToyTextEncoder", "build_text_encoder", "CrossAttentionFusion",
    "SoftPrompt", "TextBranch", "build_soft_prompt", "encode_hard_prompt", "fuse_prototypes",
    "FIXED_TEMPLATE", "QUERY_TEMPLATE", "HardPromptSet", "HTTPChatClient", "default_prompts",
    "generate_hard_prompts",
]
