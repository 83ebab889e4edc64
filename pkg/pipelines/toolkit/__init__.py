"""Speech enhancement domain-adaptation toolkit."""
