# Gaussian Mixture Package
