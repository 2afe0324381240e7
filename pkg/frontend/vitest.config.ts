import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    // the e2e file trains a small model and boots the service once
    testTimeout: 120_000,
    hookTimeout: 300_000,
    pool: "forks",
  },
});
