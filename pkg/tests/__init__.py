"""Tests for PoseLab."""
