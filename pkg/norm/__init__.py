# Normalization Layers Package
