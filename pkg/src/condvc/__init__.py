"""condvc: a desk-scale learned video codec with conditional coding modes.

Subpackages:
    entropy_lab    exact information measures and exhaustive predictor search
    video_core     frames, flows, weight maps, GOP scheduling, raw video I/O
    neural_coders  quantization, entropy models, hyperprior and conditional coders
    motion         optical flow estimation, warping, flow coding and extrapolation
    mode_codec     mode generator, predictor blending, the per-frame/GOP pipeline
    training       loss assembly, two-stage training, rate ladder, checkpoints
    eval_harness   PSNR / MS-SSIM / BPP metrics, BD-Rate, the test protocol
    cli            batch command-line front door
"""

__version__ = "0.1.0"
