# Numeric Core Package
