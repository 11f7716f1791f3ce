# Reporting Package
