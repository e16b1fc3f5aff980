"""dynrad: joint camera-pose and static/dynamic radiance-field
reconstruction from unposed image sequences, on the CPU in pure numpy.

Subpackages and modules:
  diffcore   flat parameters, MLPs, hash grids, Adam, gradient checking
  fields     static/dynamic/flow/shadow/color field heads
  render     rays, scene contraction, sampling, volume compositing
  pose       SE(3) poses, Umeyama alignment, ATE/RPE
  losses     photometric/depth/flow/cycle/dynamic/shadow objectives
  scheduler  progressive three-stage training state machine
  synth      analytic synthetic scenes with exact ground truth
  metrics    PSNR, SSIM, shadow-weight histograms
  train      end-to-end training driver
  cli        command surface (synth/train/render/eval-poses/eval-images/ablate)
"""

__version__ = "0.1.0"
