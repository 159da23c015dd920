import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // The e2e file boots a live harness process; give hooks room.
    testTimeout: 60_000,
    hookTimeout: 60_000,
  },
});
