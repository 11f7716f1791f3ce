# Experiment Package
