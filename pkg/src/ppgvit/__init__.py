"""PPG windows -> 2D images -> ViT regression with LoRA adapters."""
