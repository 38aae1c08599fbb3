"""SincVAE: learnable sinc filterbank VAE for semi-supervised anomaly detection."""
