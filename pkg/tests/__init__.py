# Test suite for EncDec Lab.