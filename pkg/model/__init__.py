# Model Package
