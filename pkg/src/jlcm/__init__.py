"""Weight compression with jointly learnable codebooks and mappings."""
