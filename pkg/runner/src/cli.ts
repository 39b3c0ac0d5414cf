#!/usr/bin/env node
/** Command-line front end: listen for producer streams and score them. */

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { MODEL_KINDS, ModelKind } from "./model";
import { RUNNER_DEFAULTS, RunnerConfig, RunnerError, RunnerServer } from "./server";

export function splitListen(listen: string): { host: string; port: number } {
  const colon = listen.lastIndexOf(":");
  if (colon <= 0 || colon === listen.length - 1) {
    throw new RunnerError(`listen address must be host:port, got ${JSON.stringify(listen)}`);
  }
  const host = listen.slice(0, colon);
  const port = Number(listen.slice(colon + 1));
  if (!Number.isInteger(port) || port < 0 || port > 65535) {
    throw new RunnerError(`bad port in ${JSON.stringify(listen)}`);
  }
  return { host, port };
}

export async function main(argv: string[]): Promise<number> {
  const args = await yargs(argv)
    .scriptName("warcflow-runner")
    .usage("$0 --listen <addr> --model <kind> --out <dir>")
    .option("listen", {
      type: "string",
      default: `${RUNNER_DEFAULTS.host}:${RUNNER_DEFAULTS.port}`,
      describe: "host:port to bind (port 0 picks an ephemeral port)",
    })
    .option("model", {
      type: "string",
      choices: MODEL_KINDS,
      demandOption: true,
      describe: "model kind to run over incoming payloads",
    })
    .option("out", {
      type: "string",
      demandOption: true,
      describe: "output directory for results.jsonl, blobs/, stats.json",
    })
    .option("window", { type: "number", default: RUNNER_DEFAULTS.window })
    .option("batch-size", { type: "number", default: RUNNER_DEFAULTS.batchSize })
    .option("flush-timeout-ms", { type: "number", default: RUNNER_DEFAULTS.flushTimeoutMs })
    .option("threshold", { type: "number", default: RUNNER_DEFAULTS.threshold })
    .option("producers", {
      type: "number",
      default: RUNNER_DEFAULTS.producers,
      describe: "number of producer connections to expect",
    })
    .option("seed", { type: "number", default: RUNNER_DEFAULTS.seed })
    .strict()
    .help()
    .parse();

  const { host, port } = splitListen(args.listen);
  const config: RunnerConfig = {
    host,
    port,
    model: args.model as ModelKind,
    outDir: args.out,
    window: args.window,
    batchSize: args["batch-size"],
    flushTimeoutMs: args["flush-timeout-ms"],
    threshold: args.threshold,
    producers: args.producers,
    seed: args.seed,
  };
  const server = new RunnerServer(config);
  const boundPort = await server.start();
  console.log(`listening ${host}:${boundPort}`);
  const stats = await server.waitStats();
  console.log(
    `${stats.samples_processed} samples in ${stats.batches_emitted} batches ` +
      `from ${stats.producers_connected} producers; ` +
      `${stats.results_written} results written to ${config.outDir}`,
  );
  return stats.protocol_errors.length > 0 ? 1 : 0;
}

if (require.main === module) {
  main(hideBin(process.argv))
    .then((code) => {
      process.exitCode = code;
    })
    .catch((err) => {
      console.error(`error: ${err instanceof Error ? err.message : err}`);
      process.exitCode = 1;
    });
}
