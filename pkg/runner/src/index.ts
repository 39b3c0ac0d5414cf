export * from "./wire";
export * from "./flow";
export * from "./model";
export * from "./sink";
export * from "./server";
export { splitListen } from "./cli";
