"""Some global values that should not change often and do not rely on runtime data."""

#: Floor applied wherever an iterate must be strictly positive. Far below 8-bit quantization, but 1/eps stays finite.
POSITIVITY_EPS = 1e-8

#: Magic bytes opening a float image file
FLOAT_IMAGE_MAGIC = b'DEQF'

#: Magic bytes opening a regularizer checkpoint file
CHECKPOINT_MAGIC = b'DEQP'

#: PSNR reported for identical images, where the MSE vanishes
PSNR_CAP_DB = 99.0

#: Stopping threshold on the relative change between two iterates
DEFAULT_TOL = 2.5e-5

#: Hard limit on step-size shrinks in a single backtracking search
MAX_BACKTRACK_SHRINKS = 60

#: Absolute slack absorbing roundoff in the sampled convexity test and the sufficient-decrease test
CONVEXITY_SLACK = 1e-9

#: Smoothing term of the differentiable total variation
TV_EPS = 1e-6

#: Sharpness of every Softplus activation in the learnable networks
SOFTPLUS_BETA = 100.0

#: Above this value of beta * x, Softplus is evaluated as the identity plus an exponentially small remainder
SOFTPLUS_THRESHOLD = 30.0

#: Photon intensities used by the experiment protocol
NOISE_LEVELS = (100.0, 60.0, 40.0)

#: Defaults for the mirror descent forward pass
MD_DEFAULTS = {
    'a': 1.0,
    'tau0': 1.0,
    'bt_gamma': 0.8,
    'bt_eta': 0.5,
    'tol': DEFAULT_TOL,
    'max_iters': 2000,
    'warm_start_tau': True,
    'grow_every': 10,
    'grow_factor': 2.0,
}

#: Defaults for end-to-end training
TRAIN_DEFAULTS = {
    'epochs': 50,
    'lr': 5e-4,
    'lr_milestone': 25,
    'loss_tv_lambda': 1e-3,
    'clip_norm': 1.0,
    'checkpoint_every': 0,
    'pretrain_epochs': 20,
    'pretrain_sigma': 0.1,
    'warm_restart': False,
}

#: Standard ADAM constants
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

#: Built-in kernel sizes and widths
GAUSSIAN_KERNEL_SIZE = 11
GAUSSIAN_KERNEL_SIGMA = 1.2
UNIFORM_KERNEL_SIZE = 9

#: Log-spaced regularization weights searched when tuning the KL+TV baseline
TV_LAMBDA_GRID = (0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0)

#: Iteration cap for the oracle-stopped Richardson-Lucy baseline
RL_BASELINE_ITERS = 200
