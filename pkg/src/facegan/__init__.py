"""GAN-based face-data augmentation with saliency-gated adversarial perturbations."""

__version__ = "0.1.0"
