"""Step times and KV sizes from the roofline cost model for the bundled profiles.

    python demos/roofline_costs.py
"""

from padgsim.model import (decode_step_time, kv_bytes_per_token, prefill_time,
                           required_kv_bandwidth, steady_prefill_rate)
from padgsim.profiles import load_profiles

GIB = 2 ** 30


def main():
    prof = load_profiles()
    for model, device, tp in [("llama-30b", "l20", 4), ("codellama-34b", "l20", 4),
                              ("qwen2-72b", "a800", 4)]:
        cfg = prof.instance_config(model, device, tp)
        rate = steady_prefill_rate(cfg)
        print(f"{model} on {tp}x {device}: {kv_bytes_per_token(cfg.model)} KV bytes/token, "
              f"{cfg.kv_capacity_tokens} tokens of KV room")
        print(f"  prefill of 512 tokens {prefill_time(cfg, 512) * 1e3:7.1f} ms, "
              f"steady prefill {rate:8.0f} tok/s needs {required_kv_bandwidth(cfg.model, rate) / GIB:6.2f} GiB/s "
              "to ship its KV")
        for batch in (1, 32, 128):
            step = decode_step_time(cfg, batch, batch * 600)
            print(f"  decode step, batch {batch:3d} x 600 ctx: {step * 1e3:6.1f} ms")


if __name__ == "__main__":
    main()
