"""Export torchvision's ImageNet VGG-19 conv weights to safetensors for the
perceptual loss and the FID embedding.

    pip install torch torchvision safetensors
    python scripts/export_vgg19.py vgg19.safetensors
"""

import sys

import torch
from safetensors.torch import save_file
from torchvision.models import VGG19_Weights, vgg19


def main(out):
    model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).eval()
    tensors = {
        f"features.{name}": t.detach().to(torch.float32).contiguous()
        for name, t in model.features.state_dict().items()
    }
    save_file(tensors, out)
    print(out)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "vgg19.safetensors")
