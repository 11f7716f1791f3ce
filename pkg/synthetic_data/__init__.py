# Synthetic Data Package
