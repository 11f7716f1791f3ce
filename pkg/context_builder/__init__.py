# Context Builder Package
