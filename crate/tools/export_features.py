"""Export ViT patch tokens as SLTK0001 feature files.

Runs a self-supervised ViT-S/16 over images and writes one file per image and
token kind, plus a CSV manifest. Needs torch and Pillow; the writer itself has
no dependencies.

    python tools/export_features.py img/*.jpg --out feats --token-kind key
"""

import argparse
import csv
import struct
import sys
from pathlib import Path

MAGIC = b"SLTK0001"
KINDS = {"key": 0, "query": 1, "value": 2}
PATCH = 16


def write_sltk(path, tokens, grid_h, grid_w, kind):
    """tokens: flat row-major sequence of grid_h * grid_w * d floats."""
    n = grid_h * grid_w
    if len(tokens) % n:
        raise ValueError(f"{len(tokens)} values do not split over {n} patches")
    d = len(tokens) // n
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIB", grid_h, grid_w, d, KINDS[kind]))
        f.write(struct.pack(f"<{len(tokens)}f", *tokens))


def extract(model, image_path, kind, size, final_norm):
    import torch
    from PIL import Image
    from torchvision import transforms

    prep = transforms.Compose(
        [
            transforms.Resize((size, size)),
            transforms.ToTensor(),
            transforms.Normalize((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
        ]
    )
    x = prep(Image.open(image_path).convert("RGB")).unsqueeze(0)
    captured = {}
    block = model.blocks[-1]

    def hook(_module, inputs, _output):
        h = inputs[0]
        if final_norm:
            h = block.norm1(h)
        qkv = block.attn.qkv(h)
        b, t, _ = qkv.shape
        heads = block.attn.num_heads
        qkv = qkv.reshape(b, t, 3, heads, -1).permute(2, 0, 3, 1, 4)
        # Heads concatenated along channels in ascending head order.
        captured["tokens"] = qkv[["query", "key", "value"].index(kind)].permute(0, 2, 1, 3).reshape(b, t, -1)

    handle = block.attn.register_forward_hook(hook)
    with torch.no_grad():
        model(x)
    handle.remove()
    tokens = captured["tokens"][0, 1:]  # drop CLS
    return tokens.flatten().tolist(), size // PATCH, size // PATCH


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("images", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--model", default="dino_vits16")
    p.add_argument("--token-kind", choices=sorted(KINDS), action="append")
    p.add_argument("--size", type=int, default=224, help="square resize, multiple of 16")
    p.add_argument("--final-norm", action="store_true", help="apply the block's layer norm before projecting")
    args = p.parse_args(argv)
    if args.size % PATCH:
        p.error(f"--size must be a multiple of {PATCH}")
    kinds = args.token_kind or ["key"]

    import torch

    model = torch.hub.load("facebookresearch/dino:main", args.model).eval()
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "manifest.csv", "w", newline="") as f:
        manifest = csv.writer(f)
        manifest.writerow(["image", "token_kind", "features", "note"])
        for image in sorted(args.images):
            for kind in kinds:
                name = f"{image.stem}.{kind}.sltk"
                try:
                    tokens, gh, gw = extract(model, image, kind, args.size, args.final_norm)
                except OSError as e:
                    manifest.writerow([image, kind, "", f"skipped: {e}"])
                    continue
                write_sltk(args.out / name, tokens, gh, gw, kind)
                manifest.writerow([image, kind, name, ""])
    return 0


if __name__ == "__main__":
    sys.exit(main())
