/**
 * Embedded-runtime host process.
 *
 * Loads user transform scripts into isolated vm contexts and applies them
 * to key/value pairs on behalf of a native storage component. The host is
 * a plain stdio server: one JSON request per line in, one JSON response
 * per line out (see protocol.ts). A script that throws, fails to load, or
 * returns the wrong type produces an error response; nothing a script
 * does may crash the host.
 *
 * Script contract (CommonJS-style module, evaluated in its own context):
 *
 *   module.exports.transform_put = (key, value) => transformedValue
 *   module.exports.transform_get = (key, value) => originalValue
 *
 * Both receive Uint8Arrays and must return a Uint8Array (or Buffer).
 */

import * as fs from "node:fs";
import * as readline from "node:readline";
import * as vm from "node:vm";
import { PROTOCOL_VERSION, Request, Response, TransformModule } from "./protocol";

const scripts = new Map<number, TransformModule>();
let nextScriptId = 1;

function loadScript(path: string): number {
  const source = fs.readFileSync(path, "utf-8");
  const sandbox = {
    module: { exports: {} as Record<string, unknown> },
    exports: {} as Record<string, unknown>,
    Buffer,
    Uint8Array,
    TextEncoder,
    TextDecoder,
    console,
  };
  sandbox.exports = sandbox.module.exports;
  const context = vm.createContext(sandbox, { name: path });
  new vm.Script(source, { filename: path }).runInContext(context, { timeout: 5000 });

  const exported = sandbox.module.exports;
  const put = exported["transform_put"];
  const get = exported["transform_get"];
  if (typeof put !== "function" || typeof get !== "function") {
    throw new Error(`${path}: script must export transform_put and transform_get functions`);
  }
  const id = nextScriptId++;
  scripts.set(id, exported as unknown as TransformModule);
  return id;
}

function toBytes(field: string | undefined, name: string): Uint8Array {
  if (typeof field !== "string") {
    throw new Error(`missing base64 field '${name}'`);
  }
  return new Uint8Array(Buffer.from(field, "base64"));
}

function applyTransform(request: Request): string {
  const script = scripts.get(request.script ?? -1);
  if (script === undefined) {
    throw new Error(`unknown script handle ${request.script}`);
  }
  if (request.dir !== "put" && request.dir !== "get") {
    throw new Error(`transform direction must be "put" or "get"`);
  }
  const key = toBytes(request.key, "key");
  const value = toBytes(request.value, "value");
  const fn = request.dir === "put" ? script.transform_put : script.transform_get;
  const result = fn(key, value);
  if (!(result instanceof Uint8Array)) {
    throw new Error(`transform_${request.dir} returned ${typeof result}, expected bytes`);
  }
  return Buffer.from(result).toString("base64");
}

function handle(request: Request): Response {
  switch (request.op) {
    case "ping":
      return { id: request.id, ok: true, version: PROTOCOL_VERSION };
    case "load":
      if (typeof request.path !== "string") {
        throw new Error("load needs a 'path' field");
      }
      return { id: request.id, ok: true, script: loadScript(request.path) };
    case "transform":
      return { id: request.id, ok: true, value: applyTransform(request) };
    case "shutdown":
      return { id: request.id, ok: true };
    default:
      throw new Error(`unknown op ${(request as { op?: string }).op}`);
  }
}

function main(): void {
  const rl = readline.createInterface({ input: process.stdin, terminal: false });
  const out = process.stdout;
  rl.on("line", (line) => {
    if (!line.trim()) {
      return;
    }
    let request: Request | undefined;
    let response: Response;
    try {
      request = JSON.parse(line) as Request;
      response = handle(request);
    } catch (err) {
      response = {
        id: request?.id,
        ok: false,
        error: err instanceof Error ? err.message : String(err),
      };
    }
    out.write(JSON.stringify(response) + "\n");
    if (request?.op === "shutdown" && response.ok) {
      rl.close();
      process.exit(0);
    }
  });
  rl.on("close", () => process.exit(0));
}

main();
