"""Regenerates lpips_oracle.safetensors with the reference `lpips` package
(and scikit-image SSIM values for the same image pairs).

The backbone uses the stand-in weights from
`cargo run --example synthetic_vgg -- vgg16 11 /tmp/vgg16_stub.safetensors`;
the linear heads are the published v0.1 weights shipped with `lpips`.
"""
import sys

import lpips
import numpy as np
import torch
from skimage.metrics import structural_similarity
from safetensors.numpy import save_file
from safetensors.torch import load_file

backbone = load_file(sys.argv[1] if len(sys.argv) > 1 else "/tmp/vgg16_stub.safetensors")
out = sys.argv[2] if len(sys.argv) > 2 else "lpips_oracle.safetensors"

model = lpips.LPIPS(net="vgg", pretrained=True, pnet_rand=True, verbose=False).double().eval()
slices = [model.net.slice1, model.net.slice2, model.net.slice3, model.net.slice4, model.net.slice5]
with torch.no_grad():
    for s in slices:
        for name, layer in s.named_children():
            if isinstance(layer, torch.nn.Conv2d):
                layer.weight.copy_(backbone[f"features.{name}.weight"].double())
                layer.bias.copy_(backbone[f"features.{name}.bias"].double())

rng = np.random.default_rng(5)
arrays = {}
expected = []
ssims = []
for i in range(5):
    h, w = [(32, 32), (40, 48), (32, 56), (48, 40), (64, 64)][i]
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = np.stack([np.sin(6 * xx + i), np.cos(5 * yy - i), np.sin(4 * (xx + yy))]) * 0.4 + 0.5
    a = np.clip(base + 0.05 * rng.standard_normal(base.shape), 0, 1)
    b = np.clip(base * (0.7 + 0.1 * i) + 0.1 * rng.standard_normal(base.shape), 0, 1)
    a, b = a.astype(np.float32), b.astype(np.float32)
    with torch.no_grad():
        d = model(torch.from_numpy(a)[None].double(), torch.from_numpy(b)[None].double(), normalize=True)
    ssims.append(float(structural_similarity(
        a.astype(np.float64), b.astype(np.float64), channel_axis=0, data_range=1.0,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False)))
    arrays[f"pred{i}"] = a
    arrays[f"target{i}"] = b
    expected.append(float(d))
for k, lin in enumerate(model.lins):
    arrays[f"lin{k}.model.1.weight"] = lin.model[1].weight.detach().float().numpy()
save_file(arrays, out, metadata={"expected": ",".join(repr(e) for e in expected), "ssim": ",".join(repr(e) for e in ssims), "backbone_seed": "11"})
print(expected, ssims)
