"""Forward-pass economics: a mask-predict decoder runs the decoder T times
regardless of sequence length, while an autoregressive decoder runs it once
per token. This script counts passes exactly and times both on the same
untrained weights.
"""

import numpy as np

from maskgrid import decoding, evalbench, model
from maskgrid.model import ModelConfig

x = np.array([1, 2, 3])

for n in (64, 1024):
    cfg = ModelConfig(enc_layers=1, dec_layers=1, width=32, heads=2,
                      vocab_text=64, vocab_image=512,
                      seq_len_text=16, seq_len_target=n)
    bundle = model.init_bundle(cfg, np.random.default_rng(0))
    nar = evalbench.bench_latency(bundle, decoding.decode_maskpredict_revise, x,
                                  repeats=3, warmup=1, T_iters=16)
    ar = evalbench.bench_latency(bundle, decoding.decode_autoregressive, x,
                                 repeats=3, warmup=1)
    print(f"n={n}:")
    print(f"  mask-predict    {nar.decoder_forward_passes:>5} decoder passes, "
          f"{nar.wall_clock * 1e3:8.1f} ms")
    print(f"  autoregressive  {ar.decoder_forward_passes:>5} decoder passes, "
          f"{ar.wall_clock * 1e3:8.1f} ms")
    print(f"  speedup {ar.wall_clock / nar.wall_clock:.1f}x "
          f"(pass ratio {ar.decoder_forward_passes // nar.decoder_forward_passes}:1)\n")
